"""Sparse-mixing conditional-flow VAE lab."""

__version__ = "0.1.0"
