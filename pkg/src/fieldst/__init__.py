"""Sparse-sensor field reconstruction with uncertainty guided ensemble self-training."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
