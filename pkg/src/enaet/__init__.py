"""Ensemble of auto-encoding transformations for semi-supervised image classification."""

__version__ = "0.1.0"
