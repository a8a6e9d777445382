"""Quantitative dMRI parameter mapping with least squares, self-supervised and VAE fitters."""

__version__ = "0.1.0"
