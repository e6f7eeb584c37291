"""SSIM-constrained adversarial attacks with PGD and elastic-net baselines.

The hot convolution kernels come from a compiled extension when it is
built; otherwise a numpy implementation is used (see :mod:`ssimadv.kernels`).
"""

from .kernels import BACKEND
from .metrics import ConstraintThresholds, SsimParams, nmse, ssim

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConstraintThresholds", "SsimParams", "nmse", "ssim", "__version__"]
