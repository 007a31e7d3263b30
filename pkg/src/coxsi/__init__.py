"""Penalized Cox regression and inference after Lasso selection."""

__version__ = "0.1.0"
