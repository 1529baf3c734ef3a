import json

import numpy as np
import pytest

from phaseadapt import fileio
from phaseadapt.cli import main
from phaseadapt.spectral import dft2


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = main(["gen-data", "--n", "12", "--k", "4", "--seed", "7",
               "--out", str(out), "--set", "data.h=32", "--set", "data.w=32"])
    assert rc == 0
    return out


def test_gen_data_writes_scenes_and_manifest(dataset_dir):
    assert (dataset_dir / "manifest.jsonl").exists()
    assert (dataset_dir / "resolved_config.ini").exists()
    scenes = list(dataset_dir.glob("scene_*_src.tnsr"))
    assert len(scenes) > 0


def test_gen_data_records_resolved_config(dataset_dir):
    text = (dataset_dir / "resolved_config.ini").read_text()
    assert "lambda_ph = 5.0" in text
    assert "lambda_cyc = 10.0" in text
    assert "lambda_d = 1.0" in text
    assert "lambda_cpn = 0.5" in text
    assert "threshold = 0.9" in text


def test_amp_swap_command(tmp_path, rng):
    content = rng.random((16, 16, 3))
    style = rng.random((16, 16, 3))
    c_path, s_path, o_path = (tmp_path / n for n in ("c.ppm", "s.ppm", "o.ppm"))
    fileio.write_ppm(c_path, content)
    fileio.write_ppm(s_path, style)
    rc = main(["amp-swap", "--content", str(c_path), "--style", str(s_path),
               "--out", str(o_path)])
    assert rc == 0
    out = fileio.read_ppm(o_path).astype(np.float64) / 255.0
    cq = fileio.read_ppm(c_path).astype(np.float64) / 255.0
    sq = fileio.read_ppm(s_path).astype(np.float64) / 255.0
    # phase comes from content, amplitudes from style (up to 8-bit rounding)
    for ch in range(3):
        fo = dft2(out[..., ch]).coeffs
        fc = dft2(cq[..., ch]).coeffs
        fs = dft2(sq[..., ch]).coeffs
        keep = (np.abs(fc) > 0.5) & (np.abs(fo) > 0.5)
        dphi = np.angle(fo[keep] / fc[keep])
        assert np.abs(dphi).mean() < 0.2
        assert abs(np.abs(fo[keep]).mean() - np.abs(fs[keep]).mean()) < \
            0.3 * np.abs(fs[keep]).mean()


def test_unknown_config_key_exits_nonzero(tmp_path, capsys):
    rc = main(["gen-data", "--n", "2", "--out", str(tmp_path / "x"),
               "--set", "data.bogus=1"])
    assert rc == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigError"
    assert "bogus" in err["message"]


def test_missing_input_file_exits_nonzero(tmp_path, capsys):
    rc = main(["eval", "--data", str(tmp_path / "none.jsonl"),
               "--segnet", str(tmp_path / "none.tnsr")])
    assert rc != 0
    err = json.loads(capsys.readouterr().err.strip())
    assert "error" in err


def test_grad_check_command(capsys):
    rc = main(["grad-check", "--instances", "2", "--seed", "0"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "phase_loss" in out


def test_train_eval_cycle_small(tmp_path, dataset_dir):
    run = tmp_path / "run"
    rc = main(["train-translator", "--data", str(dataset_dir / "manifest.jsonl"),
               "--out", str(run), "--seed", "3",
               "--set", "translator.steps=6", "--set", "translator.width=4",
               "--set", "translator.n_res=1", "--set", "translator.disc_width=4",
               "--set", "data.h=32", "--set", "data.w=32"])
    assert rc == 0
    assert (run / "T.tnsr").exists()
    trace = fileio.read_jsonl(run / "translator_trace.jsonl")
    assert len(trace) == 6

    rc = main(["train-seg", "--data", str(dataset_dir / "manifest.jsonl"),
               "--translator", str(run / "T.tnsr"), "--out", str(run / "seg"),
               "--seed", "3", "--set", "segnet.steps=6", "--set", "segnet.width=4",
               "--set", "loss.lambda_cpn=0", "--set", "data.h=32", "--set", "data.w=32"])
    assert rc == 0
    assert (run / "seg" / "phi.tnsr").exists()

    rc = main(["eval", "--data", str(dataset_dir / "manifest.jsonl"),
               "--segnet", str(run / "seg" / "phi.tnsr"),
               "--out", str(run / "eval.jsonl"), "--set", "data.h=32"])
    assert rc == 0
    rec = fileio.read_jsonl(run / "eval.jsonl")[0]
    assert "miou" in rec and "fwiou" in rec and rec["split"] == "eval_tgt"
