"""Unnormalized variational Bayes: energy models of Gaussian-smoothed data."""

__version__ = "0.1.0"
