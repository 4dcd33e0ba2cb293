"""Scalable non-ergodic ground-motion modelling with sparse Gaussian processes."""

__version__ = "0.1.0"

from .config import HyperParams  # noqa: E402
from .kernels import KernelHyper, PointSet  # noqa: E402

__all__ = ["HyperParams", "KernelHyper", "PointSet", "__version__"]
