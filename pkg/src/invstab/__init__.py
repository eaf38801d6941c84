"""Robustness analysis of variational reconstruction for 1D compressed sensing."""

__version__ = "0.1.0"
