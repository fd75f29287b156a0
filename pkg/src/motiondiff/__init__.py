"""Stochastic human motion prediction with a diffusion denoiser, written on numpy."""

from .errors import MotionDiffError

__version__ = "0.1.0"
__all__ = ["MotionDiffError", "__version__"]
