"""Desk-scale unsupervised domain adaptation for semantic segmentation,
built around two priors: Fourier-phase consistency for the cross-domain image
translator, and a label-permuted conditional prior network scoring scene
compatibility of segmentations.
"""

__version__ = "0.1.0"

from . import autodiff, cpn, fileio, losses, metrics, models, optim, spectral, synthdata
from .autodiff import Graph, grad_check
from .losses import LossWeights
from .spectral import Spectrum, amplitude_swap, dft2, idft2, phase_consistency_loss, split_amp_phase

__all__ = [
    "Graph", "grad_check", "LossWeights", "Spectrum", "amplitude_swap",
    "dft2", "idft2", "phase_consistency_loss", "split_amp_phase",
    "autodiff", "cpn", "fileio", "losses", "metrics", "models", "optim",
    "spectral", "synthdata",
]
