"""Scalar training objectives and their composition into the full
translator / segmentation losses.

All losses are means (per element / per valid pixel), not sums, so the
default weights stay meaningful across image sizes. Every function returns a
graph node; callers read ``.value`` for the scalar and run ``backward`` on
compositions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .spectral import phase_loss_node

IGNORE = 255


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_d: float = 1.0
    lambda_cyc: float = 10.0
    lambda_ph: float = 5.0
    lambda_cpn: float = 0.5

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise LossError(f"{name} must be nonnegative, got {v}")


def one_hot(mask: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    """(H, W) or (N, H, W) int mask -> (N, K, H, W); ignored pixels all-zero."""
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    bad = (mask >= k) & (mask != IGNORE)
    if bad.any():
        raise LossError(f"mask value {int(mask[bad][0])} >= K={k}")
    n, h, w = mask.shape
    out = np.zeros((n, k, h, w), dtype=dtype)
    valid = mask != IGNORE
    nn, hh, ww = np.nonzero(valid)
    out[nn, mask[valid].astype(np.intp), hh, ww] = 1
    return out


def cross_entropy_seg(logits: Node, mask: np.ndarray) -> Node:
    """Mean of -log softmax(logits)[y] over non-ignored pixels."""
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    n, k, h, w = logits.value.shape
    if mask.shape != (n, h, w):
        raise LossError(f"mask shape {mask.shape} does not match logits {(n, h, w)}")
    n_valid = int((mask != IGNORE).sum())
    if n_valid == 0:
        raise LossError("all pixels ignored")
    weights = one_hot(mask, k, dtype=logits.value.dtype) / n_valid
    g = logits.graph
    picked = ad.mul(ad.log(ad.softmax_c(logits)), g.const(weights))
    return ad.scale(ad.sum_all(picked), -1.0)


def gan_generator_loss(scores: Node, variant="least-squares") -> Node:
    """Generator side: push discriminator scores on fakes toward 'real'."""
    if variant == "log":
        _check_unit_interval(scores)
        return ad.scale(ad.mean_all(ad.log(scores)), -1.0)
    if variant == "least-squares":
        d = ad.add(scores, scores.graph.const(np.asarray(-1.0, dtype=scores.value.dtype)))
        return ad.mean_all(ad.mul(d, d))
    raise LossError(f"unknown GAN variant {variant!r}")


def gan_discriminator_loss(real_scores: Node, fake_scores: Node,
                           variant="least-squares") -> Node:
    """Critic side: real toward 1, fake toward 0."""
    if variant == "log":
        _check_unit_interval(real_scores)
        _check_unit_interval(fake_scores)
        g = real_scores.graph
        one_minus = ad.add(ad.scale(fake_scores, -1.0),
                           g.const(np.asarray(1.0, dtype=fake_scores.value.dtype)))
        return ad.add(ad.scale(ad.mean_all(ad.log(real_scores)), -1.0),
                      ad.scale(ad.mean_all(ad.log(one_minus)), -1.0))
    if variant == "least-squares":
        g = real_scores.graph
        d = ad.add(real_scores, g.const(np.asarray(-1.0, dtype=real_scores.value.dtype)))
        return ad.add(ad.mean_all(ad.mul(d, d)),
                      ad.mean_all(ad.mul(fake_scores, fake_scores)))
    raise LossError(f"unknown GAN variant {variant!r}")


def _check_unit_interval(scores: Node):
    v = scores.value
    if v is not None and (v.min() <= 0.0 or v.max() > 1.0):
        raise LossError(
            f"log-variant GAN loss needs probability scores; got range [{v.min():.4g}, {v.max():.4g}]")


def cycle_loss(x: Node, recon: Node) -> Node:
    """Mean absolute difference."""
    if x.value.shape != recon.value.shape:
        raise LossError(f"cycle loss: shape mismatch {x.value.shape} vs {recon.value.shape}")
    return ad.mean_all(ad.abs_val(ad.sub(x, recon)))


def translator_objective(translator, inverse, disc_src, disc_tgt,
                         x_src: Node, x_tgt: Node, weights: LossWeights,
                         variant="least-squares", normalize_phase=True):
    """Generator-side loss of the full translation objective: adversarial
    terms for both directions, both cycle reconstructions, and both phase
    penalties, weighted and summed into one differentiable node.

    Returns (objective, parts) where parts maps term names to nodes.
    """
    g = x_src.graph
    head = "sigmoid" if variant == "log" else "raw"
    fake_tgt = translator.apply(g, x_src)
    fake_src = inverse.apply(g, x_tgt)
    rec_src = inverse.apply(g, fake_tgt)
    rec_tgt = translator.apply(g, fake_src)

    parts = {}
    terms = []
    if weights.lambda_d > 0:
        adv = ad.add(gan_generator_loss(disc_tgt.apply(g, fake_tgt, head), variant),
                     gan_generator_loss(disc_src.apply(g, fake_src, head), variant))
        parts["adv"] = adv
        terms.append(ad.scale(adv, weights.lambda_d))
    if weights.lambda_cyc > 0:
        cyc = ad.add(cycle_loss(x_src, rec_src), cycle_loss(x_tgt, rec_tgt))
        parts["cyc"] = cyc
        terms.append(ad.scale(cyc, weights.lambda_cyc))
    if weights.lambda_ph > 0:
        ph = ad.add(phase_loss_node(x_src, fake_tgt, normalize=normalize_phase),
                    phase_loss_node(x_tgt, fake_src, normalize=normalize_phase))
        parts["phase"] = ph
        terms.append(ad.scale(ph, weights.lambda_ph))
    if not terms:
        total = g.const(np.asarray(0.0, dtype=x_src.value.dtype))
    else:
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
    parts["fake_tgt"] = fake_tgt
    parts["fake_src"] = fake_src
    return total, parts


def segmentation_objective(segnet, cpn, x_translated: Node, mask: np.ndarray,
                           x_tgt: Node, weights: LossWeights):
    """Supervised cross-entropy on translated source plus the weighted
    scene-compatibility penalty on the target prediction.

    Gradients flow into the segmentation network only; the prior network must
    be frozen. Returns (objective, parts).
    """
    from .cpn import cpn_score_node  # local import to avoid a cycle

    g = x_translated.graph
    logits_src = segnet.apply(g, x_translated)
    ce = cross_entropy_seg(logits_src, mask)
    parts = {"ce": ce}
    total = ce
    if weights.lambda_cpn > 0:
        if not cpn.frozen:
            raise LossError("scene-compatibility network must be frozen during segmentation training")
        seg_tgt = ad.softmax_c(segnet.apply(g, x_tgt))
        score = cpn_score_node(cpn, seg_tgt, x_tgt)
        parts["cpn_score"] = score
        total = ad.add(total, ad.scale(score, -weights.lambda_cpn))
    return total, parts
