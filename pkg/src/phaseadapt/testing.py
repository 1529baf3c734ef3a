"""Finite-difference verification graphs for every primitive and every loss.

Each builder constructs a tiny f64 graph whose trainable parameters feed the
op under test, then compares the analytic backward pass against central
differences. Inputs are drawn uniformly from [-1, 1] (shifted away from kinks
or into an op's domain where required, e.g. log gets positive inputs).
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from . import losses as L
from .cpn import cpn_score_node
from .models import CPN, CpnCfg
from .spectral import phase_loss_node


def _u(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _kink_safe(x, margin=1e-3):
    """Push values away from zero so step-1e-4 central differences stay on
    one side of piecewise-linear kinks."""
    return x + margin * np.sign(x) + (x == 0) * margin


def _weighted_scalar(g, node, rng):
    """Random linear functional of the op output, so every output coordinate
    carries distinct gradient signal."""
    r = g.const(_u(rng, node.value.shape))
    return ad.sum_all(ad.mul(node, r))


def _graph():
    return ad.Graph()


def _build_unary(op, transform=None):
    def build(rng):
        g = _graph()
        x = _u(rng, (2, 3, 4, 4))
        if transform:
            x = transform(x)
        p = g.param("x", x)
        return g, _weighted_scalar(g, op(p), rng)
    return build


def _build_add(rng):
    g = _graph()
    a = g.param("a", _u(rng, (2, 3, 4, 4)))
    b = g.param("b", _u(rng, (3, 1, 1)))  # broadcast path
    return g, _weighted_scalar(g, ad.add(a, b), rng)


def _build_mul(rng):
    g = _graph()
    a = g.param("a", _u(rng, (2, 3, 4, 4)))
    b = g.param("b", _u(rng, (2, 3, 4, 4)))
    return g, _weighted_scalar(g, ad.mul(a, b), rng)


def _build_matmul(rng):
    g = _graph()
    a = g.param("a", _u(rng, (3, 4)))
    b = g.param("b", _u(rng, (4, 2)))
    return g, _weighted_scalar(g, ad.matmul(a, b), rng)


def _build_conv(rng):
    g = _graph()
    x = g.param("x", _u(rng, (1, 2, 6, 6)))
    w = g.param("w", _u(rng, (3, 2, 3, 3)))
    return g, _weighted_scalar(g, ad.conv2d(x, w, stride=1, pad=1), rng)


def _build_conv_strided(rng):
    g = _graph()
    x = g.param("x", _u(rng, (1, 2, 7, 7)))  # odd size exercises the remainder path
    w = g.param("w", _u(rng, (3, 2, 3, 3)))
    return g, _weighted_scalar(g, ad.conv2d(x, w, stride=2, pad=1), rng)


def _build_tconv(rng):
    g = _graph()
    x = g.param("x", _u(rng, (1, 3, 4, 4)))
    w = g.param("w", _u(rng, (3, 2, 3, 3)))
    return g, _weighted_scalar(g, ad.conv2d_transpose(x, w, stride=2, pad=1), rng)


def _build_concat(rng):
    g = _graph()
    a = g.param("a", _u(rng, (1, 2, 4, 4)))
    b = g.param("b", _u(rng, (1, 3, 4, 4)))
    return g, _weighted_scalar(g, ad.concat_c([a, b]), rng)


def _build_sum(rng):
    g = _graph()
    p = g.param("x", _u(rng, (2, 3, 4, 4)))
    return g, ad.sum_all(p)


def _build_mean(rng):
    g = _graph()
    p = g.param("x", _u(rng, (2, 3, 4, 4)))
    return g, ad.mean_all(p)


def _build_scale(rng):
    g = _graph()
    p = g.param("x", _u(rng, (2, 3, 4, 4)))
    return g, _weighted_scalar(g, ad.scale(p, 1.7), rng)


def _build_phase_loss(rng):
    g = _graph()
    x = g.param("x", _u(rng, (1, 2, 8, 8), 0.1, 0.9))
    tx = g.param("tx", _u(rng, (1, 2, 8, 8), 0.1, 0.9))
    return g, phase_loss_node(x, tx)


def _build_cross_entropy(rng):
    g = _graph()
    logits = g.param("logits", _u(rng, (1, 3, 4, 4), -2, 2))
    mask = rng.integers(0, 3, size=(4, 4)).astype(np.uint8)
    mask[0, 0] = L.IGNORE
    return g, L.cross_entropy_seg(logits, mask)


def _build_cycle(rng):
    g = _graph()
    x = g.param("x", _u(rng, (1, 2, 4, 4)))
    r = g.param("r", _u(rng, (1, 2, 4, 4)))
    # keep |x - r| away from the kink at zero
    r.value += 0.05 * np.sign(r.value - x.value) + (r.value == x.value) * 0.05
    return g, L.cycle_loss(x, r)


def _build_gan_log(rng):
    g = _graph()
    fake = g.param("fake", _u(rng, (1, 1, 3, 3), 0.05, 0.95))
    real = g.param("real", _u(rng, (1, 1, 3, 3), 0.05, 0.95))
    gen = L.gan_generator_loss(fake, "log")
    disc = L.gan_discriminator_loss(real, fake, "log")
    return g, ad.add(gen, disc)


def _build_gan_ls(rng):
    g = _graph()
    fake = g.param("fake", _u(rng, (1, 1, 3, 3)))
    real = g.param("real", _u(rng, (1, 1, 3, 3)))
    gen = L.gan_generator_loss(fake, "least-squares")
    disc = L.gan_discriminator_loss(real, fake, "least-squares")
    return g, ad.add(gen, disc)


_TOY_CPN = None


def _toy_cpn() -> CPN:
    global _TOY_CPN
    if _TOY_CPN is None:
        cfg = CpnCfg(n_classes=2, width_mult=0.125, bottleneck_channels=1,
                     seg_branch_width=2, image_size=32, seed=7)
        model = CPN(cfg, dtype=np.float64)
        # damp weights, lift biases: keeps relus active and pool windows
        # tie-free, so the scorer is differentiable at the checked point
        jitter = np.random.default_rng(99)
        for name, p in model.params.items():
            if name.endswith(".w"):
                p *= 0.3
            else:
                p += jitter.uniform(0.3, 0.5, p.shape)
        _TOY_CPN = model.freeze()
    return _TOY_CPN


def _build_cpn_score(rng):
    g = _graph()
    # a small parameter field, upsampled and normalized, keeps the
    # coordinate count manageable while stressing the scorer's gradient
    z = g.param("z", _u(rng, (1, 2, 4, 4)))
    seg = ad.softmax_c(ad.upsample2(ad.upsample2(ad.upsample2(z))))
    image = g.leaf("image", _u(rng, (1, 3, 32, 32), 0.0, 1.0))
    return g, cpn_score_node(_toy_cpn(), seg, image)


BUILDERS = {
    "add": _build_add,
    "mul": _build_mul,
    "matmul": _build_matmul,
    "conv2d": _build_conv,
    "conv2d_strided": _build_conv_strided,
    "conv2d_transpose": _build_tconv,
    "max_pool2": _build_unary(ad.max_pool2, transform=_kink_safe),
    "upsample2": _build_unary(ad.upsample2),
    "relu": _build_unary(ad.relu, transform=_kink_safe),
    "leaky_relu": _build_unary(ad.leaky_relu, transform=_kink_safe),
    "tanh": _build_unary(ad.tanh),
    "sigmoid": _build_unary(ad.sigmoid),
    "instance_norm": _build_unary(ad.instance_norm),
    "softmax_c": _build_unary(ad.softmax_c),
    "log": _build_unary(ad.log, transform=lambda x: np.abs(x) + 0.5),
    "concat_c": _build_concat,
    "sum": _build_sum,
    "mean": _build_mean,
    "scale": _build_scale,
    "phase_loss": _build_phase_loss,
    "cross_entropy": _build_cross_entropy,
    "cycle": _build_cycle,
    "gan_log": _build_gan_log,
    "gan_least_squares": _build_gan_ls,
    "cpn_score": _build_cpn_score,
}


def primitive_grad_suite(n_instances=20, seed=0, only=None) -> dict[str, float]:
    """Worst grad_check error per op over ``n_instances`` random graphs."""
    worst = {}
    for name, build in BUILDERS.items():
        if only and name not in only:
            continue
        rng = np.random.default_rng(seed * 7919 + zlib.crc32(name.encode()))
        err = 0.0
        for _ in range(n_instances):
            g, loss = build(rng)
            err = max(err, ad.grad_check(g, loss, step=1e-4))
        worst[name] = err
    return worst
