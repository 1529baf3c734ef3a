"""2D discrete Fourier analysis: transform, amplitude/phase split, amplitude
swapping, and the differentiable phase-consistency penalty.

Conventions: unnormalized forward transform
``coeff(u,v) = sum_{h,w} x(h,w) * exp(-2*pi*i*(u*h/H + v*w/W))`` and a
1/(H*W)-normalized inverse. Power-of-two extents take the radix-2 fast path;
anything else falls back to direct summation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad


class SpectralError(ValueError):
    pass


# -- core transforms --------------------------------------------------------

@lru_cache(maxsize=32)
def _fft_plan(n: int):
    """Bit-reversal permutation and per-stage twiddle factors for length n."""
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for i in range(n):
        rev[i] = int(format(i, f"0{bits}b")[::-1], 2) if bits else 0
    twiddles = []
    m = 2
    while m <= n:
        tw = np.exp(-2j * np.pi * np.arange(m // 2) / m)
        twiddles.append(tw)
        m *= 2
    return rev, twiddles


def _fft1d(a: np.ndarray, inverse=False) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey along the last axis (length must be 2^k).

    Unnormalized in both directions; callers apply 1/n for the inverse.
    """
    n = a.shape[-1]
    if n & (n - 1):
        raise SpectralError(f"radix-2 path requires power-of-two length, got {n}")
    rev, twiddles = _fft_plan(n)
    out = np.ascontiguousarray(a[..., rev], dtype=np.complex128)
    m = 2
    for tw in twiddles:
        if inverse:
            tw = np.conj(tw)
        half = m // 2
        work = out.reshape(*out.shape[:-1], n // m, m)
        even = work[..., :half]
        odd = work[..., half:] * tw
        work[..., :half], work[..., half:] = even + odd, even - odd
        m *= 2
    return out


def _fft2(a: np.ndarray, inverse=False) -> np.ndarray:
    out = _fft1d(a, inverse)
    out = _fft1d(out.swapaxes(-1, -2), inverse).swapaxes(-1, -2)
    return out


def _direct_dft2(x: np.ndarray, inverse=False) -> np.ndarray:
    """Direct evaluation of the defining double sum (any extents)."""
    h, w = x.shape[-2], x.shape[-1]
    sign = 2j if inverse else -2j
    eh = np.exp(sign * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    ew = np.exp(sign * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return eh @ np.asarray(x, dtype=np.complex128) @ ew


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _fwd2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    if _is_pow2(h) and _is_pow2(w):
        return _fft2(np.asarray(x, dtype=np.complex128))
    return _direct_dft2(x)


def _inv2(c: np.ndarray) -> np.ndarray:
    h, w = c.shape[-2:]
    if _is_pow2(h) and _is_pow2(w):
        out = _fft2(np.asarray(c, dtype=np.complex128), inverse=True)
    else:
        out = _direct_dft2(c, inverse=True)
    return out / (h * w)


# -- public spectrum API -----------------------------------------------------

@dataclass
class Spectrum:
    """Complex coefficients of one H x W plane (f64)."""

    coeffs: np.ndarray  # complex128, shape (H, W)

    @property
    def height(self) -> int:
        return self.coeffs.shape[0]

    @property
    def width(self) -> int:
        return self.coeffs.shape[1]

    @property
    def pairs(self) -> np.ndarray:
        """(H, W, 2) real/imaginary view of the coefficients."""
        return np.stack([self.coeffs.real, self.coeffs.imag], axis=-1)


def dft2(channel: np.ndarray) -> Spectrum:
    """Unnormalized forward transform of one real-valued H x W channel."""
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise SpectralError(f"dft2 expects a non-empty 2D array, got shape {x.shape}")
    return Spectrum(_fwd2(x))


def idft2(spec: Spectrum, tol=1e-8) -> np.ndarray:
    """1/(HW)-normalized inverse, returning the real plane.

    Raises if the spectrum is not Hermitian-symmetric (imaginary residue
    above ``tol`` relative to the reconstruction's scale).
    """
    out = _inv2(spec.coeffs)
    scale = max(1.0, float(np.abs(out.real).max()))
    resid = float(np.abs(out.imag).max())
    if resid > tol * scale:
        raise SpectralError(
            f"non-Hermitian spectrum: imaginary residue {resid:.3e} exceeds {tol:.1e} x scale")
    return np.ascontiguousarray(out.real)


def split_amp_phase(spec: Spectrum) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude sqrt(re^2+im^2) and phase atan2(im, re); zero bins get phase 0."""
    c = spec.coeffs
    return np.abs(c), np.arctan2(c.imag, c.real)


def amplitude_swap(content: np.ndarray, style: np.ndarray, clamp=True) -> np.ndarray:
    """Rebuild ``content`` with ``style``'s amplitude spectrum, per channel.

    Inputs are (H, W) or (H, W, C) images; output is clamped to [0, 1]
    unless ``clamp`` is off.
    """
    content = np.asarray(content, dtype=np.float64)
    style = np.asarray(style, dtype=np.float64)
    if content.shape != style.shape:
        raise SpectralError(f"amplitude_swap: shape mismatch {content.shape} vs {style.shape}")
    single = content.ndim == 2
    cimg = content[..., None] if single else content
    simg = style[..., None] if single else style
    out = np.empty_like(cimg)
    for ch in range(cimg.shape[-1]):
        spec_c = dft2(cimg[..., ch])
        spec_s = dft2(simg[..., ch])
        amp_s = np.abs(spec_s.coeffs)
        phase_c = np.arctan2(spec_c.coeffs.imag, spec_c.coeffs.real)
        mixed = Spectrum(amp_s * np.exp(1j * phase_c))
        out[..., ch] = idft2(mixed, tol=1e-6)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out[..., 0] if single else out


# -- phase-consistency loss --------------------------------------------------

def _cosine_terms(fx: np.ndarray, ftx: np.ndarray, eps: float):
    """Per-bin cosine between coefficients viewed as 2-vectors, plus the
    retained-bin mask (denominator >= eps)."""
    dot = fx.real * ftx.real + fx.imag * ftx.imag
    denom = np.abs(fx) * np.abs(ftx)
    keep = denom >= eps
    cos = np.zeros_like(dot)
    np.divide(dot, denom, out=cos, where=keep)
    return cos, keep, denom


def phase_consistency_loss(x: np.ndarray, tx: np.ndarray, normalize=True,
                           eps=1e-12) -> tuple[float, np.ndarray]:
    """Negative mean (or sum) cosine of per-frequency phase differences,
    with the analytic gradient with respect to ``tx``.

    Accepts (H, W) or (H, W, C); channels are transformed independently and
    the contributions summed. Bins whose amplitude product falls below
    ``eps`` contribute zero. With ``normalize`` the total is divided by
    (H * W * C), bounding the loss to [-1, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    tx = np.asarray(tx, dtype=np.float64)
    if x.shape != tx.shape:
        raise SpectralError(f"phase loss: shape mismatch {x.shape} vs {tx.shape}")
    if eps <= 0:
        raise SpectralError("phase loss: eps must be positive")
    single = x.ndim == 2
    xs = x[None] if single else np.moveaxis(x, -1, 0)     # (C, H, W)
    txs = tx[None] if single else np.moveaxis(tx, -1, 0)
    norm = 1.0 / xs.size if normalize else 1.0

    fx = _fwd2(xs)
    ftx = _fwd2(txs)
    cos, keep, denom = _cosine_terms(fx, ftx, eps)
    loss = -float(cos[keep].sum()) * norm
    # d(-cos_j)/dF(tx)_j = -(F(x)_j / (|F(x)_j||F(tx)_j|) - cos_j * F(tx)_j / |F(tx)_j|^2)
    ntx2 = ftx.real ** 2 + ftx.imag ** 2
    gc = np.zeros_like(fx)
    np.divide(fx, denom, out=gc, where=keep)
    corr = np.zeros_like(fx)
    np.divide(cos * ftx, ntx2, out=corr, where=keep)
    # adjoint of the (linear) forward DFT: grad = Re(F(conj(G)))
    grad = _fwd2(np.conj(-(gc - corr))).real * norm
    return loss, (grad[0] if single else np.moveaxis(grad, 0, -1))


def phase_loss_node(x: "ad.Node", tx: "ad.Node", normalize=True, eps=1e-12) -> "ad.Node":
    """Graph op wrapping the phase-consistency loss for (N, C, H, W) nodes.

    The loss is averaged over the batch. Gradients are produced for
    whichever of the two inputs requires them; the tx-side gradient shares
    the forward pass's transforms.
    """
    def _hwc(v, b):
        return v[b].transpose(1, 2, 0)

    def fwd(n):
        xv, txv = n.inputs[0].value, n.inputs[1].value
        if xv.shape != txv.shape:
            raise ad.ShapeError(f"phase_loss: {xv.shape} vs {txv.shape}")
        total = 0.0
        grad_tx = np.empty_like(txv) if n.inputs[1].requires_grad else None
        for b in range(xv.shape[0]):
            val, gb = phase_consistency_loss(_hwc(xv, b), _hwc(txv, b),
                                             n.attrs["normalize"], n.attrs["eps"])
            total += val
            if grad_tx is not None:
                grad_tx[b] = gb.transpose(2, 0, 1)
        n.cache["grad_tx"] = grad_tx
        return np.asarray(total / xv.shape[0], dtype=xv.dtype)

    def bwd(n):
        xn, txn = n.inputs
        nb = xn.value.shape[0]
        if txn.requires_grad:
            txn.add_grad((float(n.grad) / nb) * n.cache["grad_tx"].astype(txn.value.dtype))
        if xn.requires_grad:  # cosine is symmetric: swap roles for the x side
            g = np.empty_like(xn.value)
            for b in range(nb):
                _, gb = phase_consistency_loss(_hwc(txn.value, b), _hwc(xn.value, b),
                                               n.attrs["normalize"], n.attrs["eps"])
                g[b] = gb.transpose(2, 0, 1)
            xn.add_grad((float(n.grad) / nb) * g.astype(xn.value.dtype))

    return x.graph._add("phase_loss", [x, tx],
                        {"normalize": normalize, "eps": eps}, fwd, bwd)
