"""Training orchestration: translators (adversarial, with cycle and phase
penalties), the scene-compatibility prior, the target-domain segmenter, a
self-training round on high-confidence pseudo labels, and the ablation grid.

Everything is deterministic given the run seed: data order comes from one
dedicated RNG that does not depend on which loss terms are enabled, so runs
that differ only in loss weights see identical sample sequences.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fileio
from . import losses as L
from . import metrics
from .config import RunConfig
from .cpn import cpn_score_node, train_cpn
from .models import Discriminator, SegNet, Translator, build_segnet, build_translator, build_discriminator
from .optim import AdamState, adam_step
from .spectral import phase_consistency_loss
from .synthdata import load_manifest

IGNORE = L.IGNORE


class TrainingError(RuntimeError):
    pass


@dataclass
class TranslatorBundle:
    fwd: Translator          # source -> target
    inv: Translator          # target -> source
    disc_src: Discriminator
    disc_tgt: Discriminator
    trace: list = field(default_factory=list)


def _load_split(refs):
    return [ref.load_image() for ref in refs]


def _check_nan(value, step, out_dir, models):
    if np.isfinite(value):
        return
    snapshot = None
    if out_dir is not None:
        snapshot = Path(out_dir) / f"nan_snapshot_step{step}"
        snapshot.mkdir(parents=True, exist_ok=True)
        for name, model in models.items():
            model.save(snapshot / f"{name}.tnsr")
    raise TrainingError(f"non-finite loss at step {step}"
                        + (f"; snapshot in {snapshot}" if snapshot else ""))


def train_translators(cfg: RunConfig, manifest_path, seed=None, out_dir=None,
                      on_step=None) -> TranslatorBundle:
    """Alternating generator/discriminator optimization at batch size 1."""
    seed = cfg.run.seed if seed is None else seed
    header, splits = load_manifest(manifest_path)
    src_imgs = _load_split(splits["train_src"])
    tgt_imgs = _load_split(splits["train_tgt"])
    if not src_imgs or not tgt_imgs:
        raise TrainingError("manifest has empty training splits")
    h, w = header["h"], header["w"]
    tcfg = cfg.translator

    t_fwd = build_translator(cfg.translator_cfg(seed * 100 + 1), name="T")
    t_inv = build_translator(cfg.translator_cfg(seed * 100 + 2), name="Tinv")
    d_tgt = build_discriminator(cfg.discriminator_cfg(seed * 100 + 3), name="Dt")
    d_src = build_discriminator(cfg.discriminator_cfg(seed * 100 + 4), name="Ds")

    # one retained graph carries both losses: the generator objective (with
    # discriminator scores on fakes) and the discriminator objective (same
    # fakes behind a gradient barrier, plus the real images); each step runs
    # one forward and two backward sweeps
    gg = ad.Graph()
    zero = np.zeros((1, 3, h, w), dtype=np.float32)
    x_src = gg.leaf("x_src", zero)
    x_tgt = gg.leaf("x_tgt", zero)
    gen_loss, parts = L.translator_objective(
        t_fwd, t_inv, d_src, d_tgt, x_src, x_tgt, cfg.loss, variant=cfg.gan_variant)
    head = "sigmoid" if cfg.gan_variant == "log" else "raw"
    disc_loss = ad.add(
        L.gan_discriminator_loss(d_tgt.apply(gg, x_tgt, head),
                                 d_tgt.apply(gg, ad.detach(parts["fake_tgt"]), head),
                                 cfg.gan_variant),
        L.gan_discriminator_loss(d_src.apply(gg, x_src, head),
                                 d_src.apply(gg, ad.detach(parts["fake_src"]), head),
                                 cfg.gan_variant))

    states = {m.name: AdamState(lr=tcfg.lr, decay_every=tcfg.lr_decay_every)
              for m in (t_fwd, t_inv, d_tgt, d_src)}

    rng_data = np.random.default_rng(seed)  # order independent of loss config
    models = {"T": t_fwd, "Tinv": t_inv, "Dt": d_tgt, "Ds": d_src}
    trace = []
    for step in range(tcfg.steps):
        i = int(rng_data.integers(len(src_imgs)))
        j = int(rng_data.integers(len(tgt_imgs)))
        gg.forward({"x_src": src_imgs[i][None], "x_tgt": tgt_imgs[j][None]})
        _check_nan(float(gen_loss.value), step, out_dir, models)
        _check_nan(float(disc_loss.value), step, out_dir, models)
        grads = gg.backward(gen_loss)
        for m in (t_fwd, t_inv):
            adam_step(m.params, m.grads_for(grads), states[m.name])
        dgrads = gg.backward(disc_loss)
        for m in (d_tgt, d_src):
            adam_step(m.params, m.grads_for(dgrads), states[m.name])

        rec = {"step": step, "gen_loss": float(gen_loss.value),
               "disc_loss": float(disc_loss.value)}
        for key in ("adv", "cyc", "phase"):
            if key in parts:
                rec[key] = float(parts[key].value)
        trace.append(rec)
        if on_step:
            on_step(rec)
        if out_dir is not None and tcfg.checkpoint_every and \
                (step + 1) % tcfg.checkpoint_every == 0:
            for name, model in models.items():
                model.save(Path(out_dir) / f"{name}_step{step + 1}.tnsr")

    if out_dir is not None:
        fileio.write_jsonl(Path(out_dir) / "translator_trace.jsonl", trace)
        for name, model in models.items():
            model.save(Path(out_dir) / f"{name}.tnsr")
    return TranslatorBundle(t_fwd, t_inv, d_src, d_tgt, trace)


def translate_images(translator: Translator, images) -> list[np.ndarray]:
    """Apply a frozen translator to a list of (3,H,W) images."""
    g = ad.Graph()
    x = g.leaf("x", images[0][None])
    y = translator.apply(g, x)
    out = []
    for img in images:
        g.forward({"x": img[None]})
        out.append(y.value[0].copy())
    return out


def mean_phase_consistency(translator: Translator, images, normalize=True) -> float:
    """Mean normalized phase-consistency loss of T over a list of images."""
    total = 0.0
    for img, timg in zip(images, translate_images(translator, images)):
        val, _ = phase_consistency_loss(img.transpose(1, 2, 0), timg.transpose(1, 2, 0),
                                        normalize=normalize)
        total += val
    return total / len(images)


def train_segmentation(cfg: RunConfig, translator: Translator, prior, manifest_path,
                       seed=None, segnet=None, out_dir=None, steps=None,
                       on_step=None) -> tuple[SegNet, list[dict]]:
    """Minimize supervised cross-entropy on translated source plus the
    weighted scene-compatibility penalty on unlabeled target predictions.

    ``translator`` and ``prior`` must be frozen; ``prior`` may be None when
    the compatibility weight is zero.
    """
    seed = cfg.run.seed if seed is None else seed
    if not translator.frozen:
        raise TrainingError("translator must be frozen during segmentation training")
    use_cpn = cfg.loss.lambda_cpn > 0
    if use_cpn and prior is None:
        raise TrainingError("lambda_cpn > 0 requires a trained prior network")
    if use_cpn and not prior.frozen:
        raise TrainingError("prior network must be frozen during segmentation training")

    header, splits = load_manifest(manifest_path)
    src_refs = splits["train_src"]
    src_imgs = _load_split(src_refs)
    src_masks = [ref.load_mask() for ref in src_refs]
    tgt_imgs = _load_split(splits["train_tgt"])
    translated = translate_images(translator, src_imgs)

    phi = segnet or build_segnet(cfg.seg_cfg(seed * 100 + 5), name="phi")
    state = AdamState(lr=cfg.segnet.lr, decay_every=cfg.segnet.lr_decay_every)
    rng_data = np.random.default_rng(seed + 17)
    n_steps = cfg.segnet.steps if steps is None else steps

    trace = []
    for step in range(n_steps):
        i = int(rng_data.integers(len(translated)))
        j = int(rng_data.integers(len(tgt_imgs)))
        g = ad.Graph()
        xt = g.leaf("xt", translated[i][None])
        xtgt = g.leaf("xtgt", tgt_imgs[j][None])
        total, parts = L.segmentation_objective(phi, prior, xt, src_masks[i],
                                                xtgt, cfg.loss)
        _check_nan(float(total.value), step, out_dir, {"phi": phi})
        grads = phi.grads_for(g.backward(total))
        adam_step(phi.params, grads, state)
        rec = {"step": step, "total": float(total.value), "ce": float(parts["ce"].value)}
        if "cpn_score" in parts:
            rec["cpn_score"] = float(parts["cpn_score"].value)
        trace.append(rec)
        if on_step:
            on_step(rec)

    if out_dir is not None:
        fileio.write_jsonl(Path(out_dir) / "seg_trace.jsonl", trace)
        phi.save(Path(out_dir) / "phi.tnsr")
    return phi, trace


def pseudo_label(segnet: SegNet, images, threshold: float):
    """Argmax labels where max softmax exceeds the threshold, IGNORE elsewhere.

    Returns (masks, coverage fraction).
    """
    g = ad.Graph()
    x = g.leaf("x", images[0][None])
    probs = ad.softmax_c(segnet.apply(g, x))
    masks, above, total = [], 0, 0
    for img in images:
        g.forward({"x": img[None]})
        p = probs.value[0]
        conf = p.max(axis=0)
        lab = p.argmax(axis=0).astype(np.uint8)
        lab[conf <= threshold] = IGNORE
        masks.append(lab)
        above += int((conf > threshold).sum())
        total += conf.size
    return masks, above / total


def self_train_round(cfg: RunConfig, segnet: SegNet, translator: Translator,
                     manifest_path, seed=None, out_dir=None):
    """One pseudo-label round: label high-confidence target pixels, then
    retrain mixing translated-source and pseudo-labeled target batches 1:1.

    Returns (pseudo_masks, segnet, record). If no pixel clears the threshold
    the round is skipped and the record says so.
    """
    seed = cfg.run.seed if seed is None else seed
    header, splits = load_manifest(manifest_path)
    tgt_imgs = _load_split(splits["train_tgt"])
    masks, coverage = pseudo_label(segnet, tgt_imgs, cfg.selftrain.threshold)
    usable = [k for k, m in enumerate(masks) if (m != IGNORE).any()]
    record = {"coverage": coverage, "threshold": cfg.selftrain.threshold,
              "usable_scenes": len(usable), "skipped": False}
    if not usable:
        record["skipped"] = True
        record["warning"] = "no pixel above threshold; self-training skipped"
        if out_dir is not None:
            fileio.append_jsonl(Path(out_dir) / "selftrain.jsonl", record)
        return masks, segnet, record

    src_refs = splits["train_src"]
    src_imgs = _load_split(src_refs)
    src_masks = [ref.load_mask() for ref in src_refs]
    translated = translate_images(translator, src_imgs)

    state = AdamState(lr=cfg.segnet.lr)
    rng = np.random.default_rng(seed + 29)
    for step in range(cfg.selftrain.steps):
        if step % 2 == 0:
            i = int(rng.integers(len(translated)))
            img, mask = translated[i], src_masks[i]
        else:
            k = usable[int(rng.integers(len(usable)))]
            img, mask = tgt_imgs[k], masks[k]
        g = ad.Graph()
        x = g.leaf("x", img[None])
        loss = L.cross_entropy_seg(segnet.apply(g, x), mask)
        _check_nan(float(loss.value), step, out_dir, {"phi": segnet})
        adam_step(segnet.params, segnet.grads_for(g.backward(loss)), state)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fileio.append_jsonl(out / "selftrain.jsonl", record)
        for k, m in enumerate(masks):
            fileio.write_pgm(out / f"pseudo_{k:04d}.pgm", m)
    return masks, segnet, record


def train_reference_segnet(cfg: RunConfig, manifest_path, seed=0) -> SegNet:
    """Supervised segmenter on eval-split target scenes; evaluation-only asset
    used by the semantic-preservation diagnostic."""
    from .models import SegCfg

    header, splits = load_manifest(manifest_path)
    refs = splits["eval_tgt"]
    imgs = _load_split(refs)
    masks = [ref.load_mask(evaluation=True) for ref in refs]
    net = build_segnet(SegCfg(width=cfg.refnet.width, n_classes=cfg.data.k,
                              image_size=cfg.data.h, seed=seed * 100 + 7),
                       name="phi_ref")
    state = AdamState(lr=cfg.refnet.lr)
    rng = np.random.default_rng(seed + 41)
    for step in range(cfg.refnet.steps):
        i = int(rng.integers(len(imgs)))
        g = ad.Graph()
        x = g.leaf("x", imgs[i][None])
        loss = L.cross_entropy_seg(net.apply(g, x), masks[i])
        adam_step(net.params, net.grads_for(g.backward(loss)), state)
    return net


# -- ablation harness -----------------------------------------------------------

def ablation_run(cfg: RunConfig, manifest_path, cells=None, seeds=None,
                 out_dir=None, progress=None) -> list[dict]:
    """Run every (phase on/off, prior on/off, self-training on/off) cell with
    shared seeds and shared per-seed translators; emit one record per cell
    per seed plus per-cell means.
    """
    seeds = list(cfg.run.seeds if seeds is None else seeds)
    if cells is None:
        cells = [{"phase": a, "cpn": b, "selftrain": c}
                 for a in (True, False) for b in (True, False) for c in (False,)]
    header, splits = load_manifest(manifest_path)
    ref_net = train_reference_segnet(cfg, manifest_path, seed=cfg.run.seed)
    ref_net.freeze()

    records = []
    bundles = {}
    priors = {}
    for seed in seeds:
        for cell in cells:
            cell_cfg = copy.deepcopy(cfg)
            cell_cfg.loss.lambda_ph = cfg.loss.lambda_ph if cell["phase"] else 0.0
            cell_cfg.loss.lambda_cpn = cfg.loss.lambda_cpn if cell["cpn"] else 0.0

            tkey = (cell["phase"], seed)
            if tkey not in bundles:
                bundles[tkey] = train_translators(cell_cfg, manifest_path, seed=seed)
                bundles[tkey].fwd.freeze()
            bundle = bundles[tkey]

            prior = None
            if cell["cpn"]:
                if seed not in priors:
                    train_set = [(ref.load_image(), ref.load_mask())
                                 for ref in splits["train_src"]]
                    prior, _ = train_cpn(train_set, cfg.cpn_train_cfg(seed),
                                         cfg.cpn_cfg(seed * 100 + 6))
                    priors[seed] = prior.freeze()
                prior = priors[seed]

            phi, _ = train_segmentation(cell_cfg, bundle.fwd, prior, manifest_path,
                                        seed=seed)
            if cell["selftrain"]:
                _, phi, st_rec = self_train_round(cell_cfg, phi, bundle.fwd,
                                                  manifest_path, seed=seed)
            ev = metrics.evaluate_segnet(phi, splits["eval_tgt"])
            sem = metrics.semantic_preservation(ref_net, bundle.fwd, splits["train_src"])
            rec = {"kind": "cell", "seed": seed, **cell,
                   "miou": ev["miou"], "fwiou": ev["fwiou"], "semantic_preservation": sem}
            records.append(rec)
            if progress:
                progress(rec)

    for cell in cells:
        sel = [r for r in records
               if r["kind"] == "cell" and all(r[k] == cell[k] for k in cell)]
        records.append({"kind": "mean", **cell,
                        "miou": float(np.mean([r["miou"] for r in sel])),
                        "fwiou": float(np.mean([r["fwiou"] for r in sel])),
                        "semantic_preservation": float(np.mean([r["semantic_preservation"] for r in sel]))})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        fileio.write_jsonl(Path(out_dir) / "ablation.jsonl", records)
    return records
