"""Binary tensor container, portable pixmap/graymap images, and JSONL records.

TensorFile layout (version 1): a file is a sequence of records, each
``b"TNSR" | version u8 | dtype u8 (1=f32, 2=f64, 3=u8) | ndim u8 |
ndim x extent u32-LE | payload (row-major, little-endian)``.
A multi-tensor checkpoint appends a name table: ``b"NAME" | count u32-LE |
count x (len u16-LE, utf-8 bytes)`` naming the records in order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
NAME_MAGIC = b"NAME"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}

MAX_ELEMENTS = 1 << 40  # reject absurd extents before allocating


class FileFormatError(ValueError):
    pass


def _encode_tensor(arr: np.ndarray) -> bytes:
    dt = np.dtype(arr.dtype)
    if dt not in _CODE_FOR:
        raise FileFormatError(f"unsupported dtype {arr.dtype}; use f32, f64 or u8")
    if arr.ndim > 255:
        raise FileFormatError("too many dimensions")
    head = MAGIC + struct.pack("<BBB", VERSION, _CODE_FOR[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes()
    return head + payload


def _decode_tensor(buf: memoryview, off: int) -> tuple[np.ndarray, int]:
    if bytes(buf[off:off + 4]) != MAGIC:
        raise FileFormatError(f"bad magic at offset {off}")
    off += 4
    if off + 3 > len(buf):
        raise FileFormatError("truncated header")
    version, code, ndim = struct.unpack_from("<BBB", buf, off)
    off += 3
    if version != VERSION:
        raise FileFormatError(f"unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FileFormatError(f"unknown dtype code {code}")
    if off + 4 * ndim > len(buf):
        raise FileFormatError("truncated extents")
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = 1
    for s in shape:
        count *= s
        if count > MAX_ELEMENTS:
            raise FileFormatError(f"extent overflow: {shape}")
    dt = _DTYPE_CODES[code]
    nbytes = count * dt.itemsize
    if off + nbytes > len(buf):
        raise FileFormatError(
            f"truncated payload: need {nbytes} bytes for shape {shape}, have {len(buf) - off}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
    return np.ascontiguousarray(arr), off + nbytes


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(_encode_tensor(np.asarray(arr)))


def read_tensor(path) -> np.ndarray:
    arrs, names = _read_records(path)
    if names is not None or len(arrs) != 1:
        raise FileFormatError(f"{path}: expected a single unnamed tensor")
    return arrs[0]


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Multi-tensor container with a trailing name table."""
    blob = b"".join(_encode_tensor(np.asarray(a)) for a in tensors.values())
    names = list(tensors.keys())
    table = NAME_MAGIC + struct.pack("<I", len(names))
    for name in names:
        raw = name.encode("utf-8")
        table += struct.pack("<H", len(raw)) + raw
    Path(path).write_bytes(blob + table)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    arrs, names = _read_records(path)
    if names is None:
        raise FileFormatError(f"{path}: no name table; not a checkpoint")
    if len(names) != len(arrs):
        raise FileFormatError(f"{path}: {len(names)} names for {len(arrs)} tensors")
    return dict(zip(names, arrs))


def _read_records(path):
    buf = memoryview(Path(path).read_bytes())
    arrs, names, off = [], None, 0
    while off < len(buf):
        tag = bytes(buf[off:off + 4])
        if tag == MAGIC:
            arr, off = _decode_tensor(buf, off)
            arrs.append(arr)
        elif tag == NAME_MAGIC:
            off += 4
            (count,) = struct.unpack_from("<I", buf, off)
            off += 4
            names = []
            for _ in range(count):
                (ln,) = struct.unpack_from("<H", buf, off)
                off += 2
                names.append(bytes(buf[off:off + ln]).decode("utf-8"))
                off += ln
            if off != len(buf):
                raise FileFormatError(f"{path}: trailing bytes after name table")
        else:
            raise FileFormatError(f"{path}: bad magic {tag!r} at offset {off}")
    if not arrs:
        raise FileFormatError(f"{path}: empty tensor file")
    return arrs, names


# -- portable pixmaps --------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    """P6 write of an (H, W, 3) image; floats in [0,1] quantize round-half-up."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FileFormatError(f"P6 needs (H, W, 3), got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    """P5 write of an (H, W) uint8 class-ID map."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FileFormatError(f"P5 needs (H, W), got {mask.shape}")
    mask = mask.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode())
        f.write(mask.tobytes())


def _read_pnm_header(f, magic):
    if f.read(2) != magic:
        raise FileFormatError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise FileFormatError("truncated header")
        line = line.split(b"#", 1)[0]
        fields.extend(int(t) for t in line.split())
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise FileFormatError(f"only 8-bit supported, maxval={maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    """P6 read returning (H, W, 3) uint8."""
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P6")
        data = f.read(w * h * 3)
        if len(data) != w * h * 3:
            raise FileFormatError("truncated pixel data")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P5")
        data = f.read(w * h)
        if len(data) != w * h:
            raise FileFormatError("truncated pixel data")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# -- line-delimited records ---------------------------------------------------

def append_jsonl(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
