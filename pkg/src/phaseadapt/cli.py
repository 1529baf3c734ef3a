"""Command-line entry point binding data generation, the three training
phases, self-training, evaluation, amplitude swapping, the ablation grid, and
the gradient-check suite.

Every subcommand takes ``--config`` (INI) plus ``--set section.key=value``
overrides and an explicit ``--seed``; each run directory receives the fully
resolved configuration. Errors exit nonzero with a one-line JSON record on
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio, metrics, trainer
from .config import ConfigError, RunConfig, dump_config, load_config
from .cpn import train_cpn
from .models import CPN, SegNet, Translator
from .synthdata import DatasetCfg, gen_dataset, load_manifest


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="run seed")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if getattr(args, "out", None):
        cfg.run.out_dir = args.out
    return cfg


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "resolved_config.ini")
    return out


def cmd_gen_data(args):
    cfg = _resolve(args)
    if args.n is not None:
        cfg.data.n = args.n
    if args.k is not None:
        cfg.data.k = args.k
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "resolved_config.ini")
    manifest = gen_dataset(cfg.data, cfg.run.seed, out)
    print(f"wrote {cfg.data.n} scenes and {manifest}")


def cmd_train_translator(args):
    cfg = _resolve(args)
    out = _prepare_out(cfg)
    bundle = trainer.train_translators(cfg, args.data, seed=cfg.run.seed, out_dir=out)
    print(f"trained translators ({bundle.fwd.num_params} params each); "
          f"final gen loss {bundle.trace[-1]['gen_loss']:.4f}; artifacts in {out}")


def cmd_train_cpn(args):
    cfg = _resolve(args)
    out = _prepare_out(cfg)
    header, splits = load_manifest(args.data)
    train_set = [(r.load_image(), r.load_mask()) for r in splits["train_src"]]
    model, trace = train_cpn(train_set, cfg.cpn_train_cfg(cfg.run.seed),
                             cfg.cpn_cfg(cfg.run.seed * 100 + 6))
    model.save(out / "Q.tnsr")
    fileio.write_jsonl(out / "cpn_trace.jsonl", trace)
    print(f"trained prior network ({model.num_params} params, "
          f"bottleneck {model.bottleneck_size} scalars); final NLL {trace[-1]['nll']:.4f}")


def cmd_train_seg(args):
    cfg = _resolve(args)
    out = _prepare_out(cfg)
    translator = Translator.load(args.translator, name="T").freeze()
    prior = None
    if args.cpn is not None:
        prior = CPN.load(args.cpn, name="Q").freeze()
    phi, trace = trainer.train_segmentation(cfg, translator, prior, args.data,
                                            seed=cfg.run.seed, out_dir=out)
    print(f"trained segmenter; final loss {trace[-1]['total']:.4f}; artifacts in {out}")


def cmd_self_train(args):
    cfg = _resolve(args)
    out = _prepare_out(cfg)
    translator = Translator.load(args.translator, name="T").freeze()
    phi = SegNet.load(args.segnet, name="phi")
    masks, phi, record = trainer.self_train_round(cfg, phi, translator, args.data,
                                                  seed=cfg.run.seed, out_dir=out)
    phi.save(out / "phi_selftrained.tnsr")
    print(json.dumps(record, sort_keys=True))


def cmd_eval(args):
    cfg = _resolve(args)
    phi = SegNet.load(args.segnet, name="phi")
    header, splits = load_manifest(args.data)
    result = metrics.evaluate_segnet(phi, splits[args.split])
    record = {"split": args.split, **result}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        fileio.append_jsonl(args.out, record)
    print(json.dumps(record, sort_keys=True))


def cmd_amp_swap(args):
    from .spectral import amplitude_swap

    content = fileio.read_ppm(args.content).astype(np.float64) / 255.0
    style = fileio.read_ppm(args.style).astype(np.float64) / 255.0
    fileio.write_ppm(args.out, amplitude_swap(content, style))
    print(f"wrote {args.out}: phase of {args.content}, amplitudes of {args.style}")


def cmd_ablate(args):
    cfg = _resolve(args)
    out = _prepare_out(cfg)
    cells = None
    if args.with_selftrain:
        cells = [{"phase": a, "cpn": b, "selftrain": c}
                 for a in (True, False) for b in (True, False) for c in (True, False)]
    records = trainer.ablation_run(cfg, args.data, cells=cells, out_dir=out,
                                   progress=lambda r: print(json.dumps(r, sort_keys=True)))
    for r in records:
        if r["kind"] == "mean":
            print(json.dumps(r, sort_keys=True))


def cmd_grad_check(args):
    from .testing import primitive_grad_suite

    worst = primitive_grad_suite(n_instances=args.instances, seed=args.seed or 0)
    failed = {k: v for k, v in worst.items() if v > 1e-4}
    for name, err in sorted(worst.items()):
        print(f"{'FAIL' if err > 1e-4 else 'ok  '} {name:24s} max rel err {err:.3e}")
    if failed:
        raise SystemExit(1)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="phaseadapt",
                                 description="Desk-scale domain adaptation with "
                                             "phase and scene-compatibility priors")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic two-domain benchmark")
    _common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-translator", help="adversarial translator training")
    _common(p)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train_translator)

    p = sub.add_parser("train-cpn", help="train the scene-compatibility prior")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train_cpn)

    p = sub.add_parser("train-seg", help="train the target-domain segmenter")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--translator", required=True, help="translator checkpoint")
    p.add_argument("--cpn", default=None, help="prior checkpoint (omit for lambda_cpn=0)")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train_seg)

    p = sub.add_parser("self-train", help="one pseudo-label round")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--translator", required=True)
    p.add_argument("--segnet", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_self_train)

    p = sub.add_parser("eval", help="mIoU/fwIoU of a segmenter on a split")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--segnet", required=True)
    p.add_argument("--split", default="eval_tgt",
                   choices=["train_src", "eval_tgt"])
    p.add_argument("--out", default=None, help="append JSONL record here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("amp-swap", help="recombine phase of one image with "
                                        "amplitudes of another")
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_amp_swap)

    p = sub.add_parser("ablate", help="run the ablation grid")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--with-selftrain", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of every primitive")
    _common(p)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(fn=cmd_grad_check)

    args = ap.parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, FileNotFoundError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2
    except Exception as e:  # structured record for anything else
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
