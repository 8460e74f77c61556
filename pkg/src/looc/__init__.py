"""Ensembles of self-supervised leave-out classifiers for OOD detection."""

from looc.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
