"""Stochastic flows under the standard Gaussian measure."""

__version__ = "0.1.0"
