"""Robust training against noisy labels via early stopping and safe-set resumption."""

__version__ = "0.1.0"
