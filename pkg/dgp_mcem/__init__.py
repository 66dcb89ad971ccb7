"""Stationary-point inference with derivative-constrained Gaussian processes fitted by Monte Carlo EM."""

__version__ = "0.1.0"
