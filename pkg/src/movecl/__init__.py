"""Mixture-of-variational-experts layers for task-agnostic continual learning.

A small, numpy-backed research library: variational dense layers with
snapshot priors, sparsely gated mixtures of variational experts,
entropy and determinant-based diversity objectives, and a harness that
trains task streams sequentially and reports accuracy/forgetting.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, finite_diff_check
from .variational import GaussianMeanField, VariationalDense, kl_diag_gaussian

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_check",
    "GaussianMeanField",
    "VariationalDense",
    "kl_diag_gaussian",
    "__version__",
]
