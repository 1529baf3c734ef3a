"""Label permutation augmentation, prior-network training, and
scene-compatibility scoring.

The prior network learns layout compatibility rather than class semantics:
every training example gets a fresh uniformly random relabeling of its mask,
so only image-structure cues survive. Scoring feeds a (soft) segmentation
through the frozen network and returns the negated per-pixel cross-entropy
between the segmentation and the network's reconstruction: 0 is a perfect,
fully confident reconstruction; more negative is less compatible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Node
from .models import CPN, CpnCfg, build_cpn
from .optim import AdamState, adam_step

IGNORE = losses.IGNORE


class PermutationError(ValueError):
    pass


@dataclass
class Permutation:
    mapping: np.ndarray  # mapping[i] = new label of class i

    @property
    def k(self) -> int:
        return self.mapping.size

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if not np.array_equal(np.sort(m), np.arange(m.size)):
            raise PermutationError(f"not a bijection on [0,{m.size}): {m}")
        self.mapping = m

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.k)
        return Permutation(inv)


def sample_permutation(k: int, rng: np.random.Generator) -> Permutation:
    if k < 1:
        raise PermutationError(f"K must be >= 1, got {k}")
    return Permutation(rng.permutation(k))


def permute_mask(mask: np.ndarray, perm: Permutation) -> np.ndarray:
    """Relabel class IDs; the ignore sentinel passes through unchanged."""
    mask = np.asarray(mask)
    valid = mask != IGNORE
    if valid.any() and mask[valid].max() >= perm.k:
        raise PermutationError(f"mask value {int(mask[valid].max())} >= K={perm.k}")
    out = np.full_like(mask, IGNORE)
    out[valid] = perm.mapping[mask[valid].astype(np.intp)]
    return out


# -- training ------------------------------------------------------------------

@dataclass
class CpnTrainCfg:
    steps: int = 600
    batch_size: int = 4
    lr: float = 1e-4
    lr_decay_every: int = 30000
    lr_decay_factor: float = 0.1
    seed: int = 0


def train_cpn(dataset, cfg: CpnTrainCfg, model_cfg: CpnCfg,
              on_step=None) -> tuple[CPN, list[dict]]:
    """Train a prior network to reconstruct permuted masks from (image, mask)
    pairs. ``dataset`` is a sequence of (image (3,H,W) f32, mask (H,W) int).

    Returns the trained model and the per-step loss trace.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    k = model_cfg.n_classes
    h = w = model_cfg.image_size
    for img, mask in dataset:
        if img.shape[1:] != mask.shape or mask.shape != (h, w):
            raise ValueError(f"scene size {img.shape[1:]} / mask {mask.shape} != cfg {(h, w)}")

    model = build_cpn(model_cfg, name="Q")
    rng = np.random.default_rng(cfg.seed)
    b = min(cfg.batch_size, len(dataset))

    g = ad.Graph()
    img_leaf = g.leaf("image", np.zeros((b, 3, h, w), dtype=np.float32))
    seg_leaf = g.leaf("seg", np.zeros((b, k, h, w), dtype=np.float32))
    logits = model.apply(g, img_leaf, seg_leaf)
    # NLL of reconstructing the permuted mask, with the permuted one-hot both
    # as bottleneck input and as target
    target_leaf = g.leaf("weights", np.zeros((b, k, h, w), dtype=np.float32))
    nll = ad.scale(ad.sum_all(ad.mul(ad.log(ad.softmax_c(logits)), target_leaf)), -1.0)

    state = AdamState(lr=cfg.lr, decay_every=cfg.lr_decay_every,
                      decay_factor=cfg.lr_decay_factor)
    trace = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), size=b)
        imgs = np.stack([dataset[i][0] for i in idx])
        segs = np.empty((b, k, h, w), dtype=np.float32)
        for j, i in enumerate(idx):
            perm = sample_permutation(k, rng)
            segs[j] = losses.one_hot(permute_mask(dataset[i][1], perm), k)[0]
        n_valid = max(1, int(segs.sum()))
        g.forward({"image": imgs, "seg": segs, "weights": segs / n_valid})
        grads = model.grads_for(g.backward(nll))
        adam_step(model.params, grads, state)
        rec = {"step": step, "nll": float(nll.value), "lr": state.lr}
        trace.append(rec)
        if on_step:
            on_step(rec)
    return model, trace


# -- scoring -------------------------------------------------------------------

def cpn_score_node(model: CPN, seg: Node, image: Node) -> Node:
    """Log-compatibility of a soft segmentation with an image, as a graph node
    differentiable with respect to ``seg``.

    score = -(1/(N*H*W)) * sum over pixels of H(seg, reconstruction), which is
    <= 0 with equality only for an exact one-hot reconstruction.
    """
    if not model.frozen:
        raise losses.LossError("prior network must be frozen before scoring")
    v = seg.value
    sums = v.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise losses.LossError("segmentation input must be softmax-normalized per pixel")
    g = seg.graph
    logits = model.apply(g, image, seg)
    n, _, h, w = v.shape
    per_pix = ad.mul(ad.log(ad.softmax_c(logits)), seg)
    return ad.scale(ad.sum_all(per_pix), 1.0 / (n * h * w))


def cpn_score(model: CPN, seg: np.ndarray, image: np.ndarray) -> float:
    """Convenience value-level scorer for (K,H,W) softmax and (3,H,W) image."""
    g = ad.Graph()
    seg_node = g.leaf("seg", seg[None].astype(np.float32))
    img_node = g.leaf("image", image[None].astype(np.float32))
    return float(cpn_score_node(model, seg_node, img_node).value)
