"""Exact transformer construction for Gaussian kernel regression on manifolds."""

__version__ = "0.1.0"
