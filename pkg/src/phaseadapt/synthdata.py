"""Synthetic two-domain benchmark with shared geometry and divergent appearance.

Each scene is rendered once as geometry (shape primitives on a textured
background, giving the mask) and materialized in two domains: the source
rendering uses per-class colormaps and textures; the target rendering applies
a fixed smooth positive filter to each channel's amplitude spectrum, a global
affine color shift, and small additive noise. The per-bin Fourier phase is
untouched by the amplitude filter, so geometry is exactly shared while
appearance statistics differ.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import fileio
from .spectral import _fwd2, _inv2

IGNORE = 255


class DataError(ValueError):
    pass


@dataclass
class ShiftCfg:
    """Source-to-target appearance shift. Identity when every field is neutral.

    The color map is a full affine transform (3x3 matrix, row-major, plus
    offset): mixing channels rotates hue relationships globally, so the gap
    survives per-channel normalization inside segmentation networks.
    """

    amp_low_gain: float = 0.55      # gain of the low-frequency amplitude band (DC exempt)
    amp_high_gain: float = 1.35     # gain of the high-frequency band
    amp_sigma: float = 6.0          # band transition scale (frequency bins)
    color_matrix: tuple = (0.08, 0.62, 0.25,
                           0.05, 0.20, 0.70,
                           0.65, 0.15, 0.15)
    color_shift: tuple = (0.03, 0.02, 0.02)
    noise_sigma: float = 0.01
    phase_jitter: float = 0.0       # radians; adversarial config only

    @classmethod
    def identity(cls):
        return cls(amp_low_gain=1.0, amp_high_gain=1.0,
                   color_matrix=(1, 0, 0, 0, 1, 0, 0, 0, 1),
                   color_shift=(0, 0, 0), noise_sigma=0.0, phase_jitter=0.0)


@dataclass
class Scene:
    source_image: np.ndarray  # (H, W, 3) f32 in [0,1]
    target_image: np.ndarray  # (H, W, 3) f32 in [0,1]
    mask: np.ndarray          # (H, W) uint8 class IDs
    seed: int


# class appearance: (base RGB, texture amplitude); class 0 is background
_CLASS_COLORS = [
    (np.array([0.28, 0.33, 0.30]), 0.10),  # background
    (np.array([0.85, 0.25, 0.20]), 0.08),  # disks
    (np.array([0.20, 0.45, 0.85]), 0.08),  # rectangles
    (np.array([0.90, 0.80, 0.25]), 0.08),  # triangles
    (np.array([0.35, 0.75, 0.35]), 0.10),  # stripe bands
    (np.array([0.75, 0.35, 0.75]), 0.08),
    (np.array([0.25, 0.75, 0.75]), 0.08),
    (np.array([0.95, 0.55, 0.15]), 0.08),
]


def _blur3(img):
    """3x3 binomial blur per channel (edge-replicated); softens shape edges so
    the spectral filter's ringing cannot push pixels out of range."""
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    out = (k[0] * p[:-2] + k[1] * p[1:-1] + k[2] * p[2:])
    out = (k[0] * out[:, :-2] + k[1] * out[:, 1:-1] + k[2] * out[:, 2:])
    return out


def _smooth_field(rng, h, w, n_waves=4, scale=1.0):
    """Band-limited random texture in [-scale, scale]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w))
    for _ in range(n_waves):
        fy, fx = rng.uniform(0.5, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    out /= n_waves
    return out * scale


def _disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _rect(h, w, cy, cx, hh, hw):
    yy, xx = np.mgrid[0:h, 0:w]
    return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)


def _triangle(h, w, cy, cx, size):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy >= cy - size) & (yy <= cy + size) & (np.abs(xx - cx) <= (yy - (cy - size)) / 2)


def _stripes(h, w, cy, cx, hh, hw, period=4):
    yy, xx = np.mgrid[0:h, 0:w]
    band = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    return band & (((yy + xx) // period) % 2 == 0)


_SHAPE_FNS = [_disk, _rect, _triangle, _stripes]


def _amp_filter(h, w, cfg: ShiftCfg):
    """Fixed smooth positive gain over the frequency radius. DC is exempt so
    the global mean is owned by the affine color shift, keeping the filtered
    image inside [0,1] (clamping would break phase preservation)."""
    fy = np.minimum(np.arange(h), h - np.arange(h))
    fx = np.minimum(np.arange(w), w - np.arange(w))
    rad = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    t = np.exp(-(rad / max(cfg.amp_sigma, 1e-6)) ** 2)
    gain = cfg.amp_high_gain + (cfg.amp_low_gain - cfg.amp_high_gain) * t
    gain[0, 0] = 1.0
    return gain


def gen_scene(seed: int, k: int = 5, h: int = 64, w: int = 64,
              shift: ShiftCfg | None = None, n_shapes: int | None = None,
              dtype=np.float32) -> Scene:
    """Render one scene deterministically from its seed.

    K-1 shape classes are drawn from disks/rectangles/triangles/stripes.
    Placement retries are bounded: crowded scenes simply get fewer shapes.
    ``dtype=np.float64`` returns the exact render (the f32 default matches the
    on-disk tensor format).
    """
    if not (2 <= k <= 8):
        raise DataError(f"K must be in [2, 8], got {k}")
    if h & (h - 1) or w & (w - 1):
        raise DataError(f"extents must be powers of two, got {(h, w)}")
    shift = shift if shift is not None else ShiftCfg()
    rng = np.random.default_rng(seed)

    mask = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    if n_shapes is None:
        n_shapes = int(rng.integers(k - 1, 2 * (k - 1) + 1))
    placed = 0
    class_cycle = [1 + (i % (k - 1)) for i in range(n_shapes)]
    for cls in class_cycle:
        shape_fn = _SHAPE_FNS[(cls - 1) % len(_SHAPE_FNS)]
        for _ in range(12):  # bounded retries, then give up on this shape
            cy, cx = rng.integers(8, h - 8), rng.integers(8, w - 8)
            size = int(rng.integers(5, max(6, h // 6)))
            if shape_fn is _disk:
                region = shape_fn(h, w, cy, cx, size)
            elif shape_fn is _triangle:
                region = shape_fn(h, w, cy, cx, size)
            else:
                hw2 = int(rng.integers(4, max(5, w // 6)))
                region = shape_fn(h, w, cy, cx, size, hw2)
            if not region.any() or (occupied & region).any():
                continue
            mask[region] = cls
            occupied |= region
            placed += 1
            break

    # source rendering: per-class color + texture
    src = np.zeros((h, w, 3), dtype=np.float64)
    for cls in range(k):
        sel = mask == cls
        if not sel.any():
            continue
        base, tex_amp = _CLASS_COLORS[cls]
        tex = _smooth_field(rng, h, w, scale=tex_amp)
        for c in range(3):
            src[..., c][sel] = base[c] + tex[sel]
    src += _smooth_field(rng, h, w, n_waves=3, scale=0.03)[..., None]
    src = _blur3(src)
    src = np.clip(src, 0.1, 0.9)  # margin keeps the filtered target in range

    # target rendering: spectral amplitude filter, affine color shift, noise
    gain = _amp_filter(h, w, shift)
    tgt = np.empty_like(src)
    for c in range(3):
        spec = _fwd2(src[..., c]) * gain
        if shift.phase_jitter > 0:
            jit = rng.uniform(-shift.phase_jitter, shift.phase_jitter, size=(h, w))
            jrev = np.roll(np.flip(jit, (0, 1)), (1, 1), (0, 1))  # value at conjugate bin
            jit = (jit - jrev) / 2  # antisymmetric, so the spectrum stays Hermitian
            spec = spec * np.exp(1j * jit)
        tgt[..., c] = _inv2(spec).real
    m = np.asarray(shift.color_matrix, dtype=np.float64).reshape(3, 3)
    tgt = tgt @ m.T + np.asarray(shift.color_shift)
    if shift.noise_sigma > 0:
        tgt += rng.normal(0.0, shift.noise_sigma, size=tgt.shape)
    tgt = np.clip(tgt, 0.0, 1.0)

    return Scene(src.astype(dtype), tgt.astype(dtype), mask, seed)


# -- dataset materialization ----------------------------------------------------

@dataclass
class SceneRef:
    """One manifest row: where a scene's files live and what may be read."""

    scene_id: int
    split: str           # train_src | train_tgt | eval_tgt
    image_path: str
    mask_path: str
    masks_visible: bool
    root: Path = field(default=None, repr=False)

    def load_image(self) -> np.ndarray:
        return fileio.read_tensor(self.root / self.image_path)

    def load_mask(self, evaluation=False) -> np.ndarray:
        if not self.masks_visible and not evaluation:
            raise DataError(
                f"masks of split {self.split!r} are evaluation-only; "
                "training code must not read them")
        return fileio.read_pgm(self.root / self.mask_path)


@dataclass
class DatasetCfg:
    n: int = 100
    k: int = 5
    h: int = 64
    w: int = 64
    split_fracs: tuple = (0.7, 0.15, 0.15)  # train_src, train_tgt, eval_tgt
    shift: ShiftCfg = field(default_factory=ShiftCfg)


def gen_dataset(cfg: DatasetCfg, seed: int, out_dir) -> Path:
    """Write scenes plus a JSONL manifest; returns the manifest path.

    The three splits use disjoint scenes. Source-side scenes expose masks to
    training; target-train scenes carry masks on disk but flag them
    evaluation-only; eval-target scenes expose masks for scoring.
    """
    if cfg.n <= 0:
        raise DataError(f"n must be positive, got {cfg.n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_src = int(round(cfg.n * cfg.split_fracs[0]))
    n_tgt = int(round(cfg.n * cfg.split_fracs[1]))
    splits = (["train_src"] * n_src + ["train_tgt"] * n_tgt
              + ["eval_tgt"] * (cfg.n - n_src - n_tgt))

    records = [{"kind": "header", "n": cfg.n, "k": cfg.k, "h": cfg.h, "w": cfg.w,
                "seed": seed, "shift": asdict(cfg.shift),
                "splits": {"train_src": n_src, "train_tgt": n_tgt,
                           "eval_tgt": cfg.n - n_src - n_tgt}}]
    for i, split in enumerate(splits):
        scene = gen_scene(seed * 1_000_003 + i, cfg.k, cfg.h, cfg.w, cfg.shift)
        stem = f"scene_{i:04d}"
        domain = "src" if split == "train_src" else "tgt"
        img = scene.source_image if domain == "src" else scene.target_image
        img_chw = np.ascontiguousarray(img.transpose(2, 0, 1))
        fileio.write_tensor(out / f"{stem}_{domain}.tnsr", img_chw)
        fileio.write_ppm(out / f"{stem}_{domain}.ppm", img)
        fileio.write_pgm(out / f"{stem}_mask.pgm", scene.mask)
        records.append({"kind": "scene", "scene_id": i, "split": split,
                        "image": f"{stem}_{domain}.tnsr",
                        "preview": f"{stem}_{domain}.ppm",
                        "mask": f"{stem}_mask.pgm",
                        "masks_visible": split != "train_tgt"})
    manifest = out / "manifest.jsonl"
    fileio.write_jsonl(manifest, records)
    return manifest


def load_manifest(manifest_path) -> tuple[dict, dict[str, list[SceneRef]]]:
    """Returns (header, split -> scene refs)."""
    manifest_path = Path(manifest_path)
    records = fileio.read_jsonl(manifest_path)
    if not records or records[0].get("kind") != "header":
        raise DataError(f"{manifest_path}: missing manifest header")
    header = records[0]
    splits: dict[str, list[SceneRef]] = {"train_src": [], "train_tgt": [], "eval_tgt": []}
    for rec in records[1:]:
        if rec.get("kind") != "scene":
            continue
        ref = SceneRef(rec["scene_id"], rec["split"], rec["image"], rec["mask"],
                       rec["masks_visible"], root=manifest_path.parent)
        splits[rec["split"]].append(ref)
    return header, splits
