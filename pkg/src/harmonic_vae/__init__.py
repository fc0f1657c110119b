"""Harmonic analysis of variational autoencoders in Gaussian spaces."""

__version__ = "0.1.0"
