"""Masked video autoencoder that reconstructs frames and frame-difference motion."""

__version__ = "0.1.0"
