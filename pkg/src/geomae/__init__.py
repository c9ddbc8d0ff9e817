"""Geometry-aware masked pre-training targets and a desk-scale autoencoder."""

__version__ = "0.1.0"
