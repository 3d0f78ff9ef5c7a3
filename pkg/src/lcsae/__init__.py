"""Bayesian latent class model for small area estimation with a smooth age effect."""

__version__ = "0.1.0"
