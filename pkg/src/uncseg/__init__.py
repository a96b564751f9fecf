"""Uncertainty-weighted Bayesian training for binary segmentation at desk scale."""

__version__ = "0.1.0"
