"""Hybrid spectral-spatial network for hyperspectral single-image super-resolution."""

__version__ = "0.1.0"
