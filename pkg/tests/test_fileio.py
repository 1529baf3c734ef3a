import struct

import numpy as np
import pytest

from phaseadapt import fileio


def test_tensor_round_trip_f32(tmp_path, rng):
    arr = rng.standard_normal((3, 5, 2)).astype(np.float32)
    path = tmp_path / "t.tnsr"
    fileio.write_tensor(path, arr)
    back = fileio.read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)  # bit-identical


def test_tensor_round_trip_f64_and_u8(tmp_path, rng):
    for arr in (rng.standard_normal((4, 4)),
                (rng.random((2, 3)) * 255).astype(np.uint8)):
        path = tmp_path / "t.tnsr"
        fileio.write_tensor(path, arr)
        assert np.array_equal(fileio.read_tensor(path), arr)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "bad.tnsr"
    # declared 2x2 f32 but 15 payload bytes
    head = b"TNSR" + struct.pack("<BBB", 1, 1, 2) + struct.pack("<2I", 2, 2)
    path.write_bytes(head + b"\x00" * 15)
    with pytest.raises(fileio.FileFormatError, match="truncated payload"):
        fileio.read_tensor(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.tnsr"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(fileio.FileFormatError, match="bad magic"):
        fileio.read_tensor(path)


def test_extent_overflow_rejected(tmp_path):
    path = tmp_path / "bad.tnsr"
    head = b"TNSR" + struct.pack("<BBB", 1, 1, 4) + struct.pack("<4I", *([2 ** 31 - 1] * 4))
    path.write_bytes(head + b"\x00" * 64)
    with pytest.raises(fileio.FileFormatError, match="extent overflow"):
        fileio.read_tensor(path)


def test_checkpoint_named_tensors(tmp_path, rng):
    tensors = {"enc.w": rng.standard_normal((2, 3)).astype(np.float32),
               "enc.b": np.zeros(3, dtype=np.float32),
               "meta": np.frombuffer(b'{"k":5}', dtype=np.uint8)}
    path = tmp_path / "ckpt.tnsr"
    fileio.write_checkpoint(path, tensors)
    back = fileio.read_checkpoint(path)
    assert set(back) == set(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_ppm_round_trip_aligned(tmp_path):
    img = (np.arange(48).reshape(4, 4, 3) * 5 % 256).astype(np.uint8)
    path = tmp_path / "a.ppm"
    fileio.write_ppm(path, img)
    assert np.array_equal(fileio.read_ppm(path), img)


def test_ppm_quantizes_round_half_up(tmp_path):
    img = np.full((1, 1, 3), 0.5 / 255 + 1.0 / 255, dtype=np.float64)  # 1.5/255
    path = tmp_path / "q.ppm"
    fileio.write_ppm(path, img)
    assert fileio.read_ppm(path)[0, 0, 0] == 2  # round half up


def test_ppm_float_identity_for_8bit_values(tmp_path, rng):
    quantized = rng.integers(0, 256, (4, 4, 3)).astype(np.uint8)
    path = tmp_path / "i.ppm"
    fileio.write_ppm(path, quantized.astype(np.float64) / 255.0)
    assert np.array_equal(fileio.read_ppm(path), quantized)


def test_pgm_round_trip(tmp_path):
    mask = np.array([[0, 1, 2], [255, 4, 0]], dtype=np.uint8)
    path = tmp_path / "m.pgm"
    fileio.write_pgm(path, mask)
    assert np.array_equal(fileio.read_pgm(path), mask)


def test_jsonl_round_trip(tmp_path):
    path = tmp_path / "r.jsonl"
    records = [{"step": 0, "loss": 1.5}, {"step": 1, "loss": 0.7}]
    fileio.write_jsonl(path, records)
    fileio.append_jsonl(path, {"step": 2, "loss": 0.2})
    back = fileio.read_jsonl(path)
    assert back == records + [{"step": 2, "loss": 0.2}]
