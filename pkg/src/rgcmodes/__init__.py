"""Synthetic retinal recordings and mean-covariance RBM analysis of their
population codes."""

__version__ = "0.1.0"
