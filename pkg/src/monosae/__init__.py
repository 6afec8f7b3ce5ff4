"""Sparse autoencoders for embedding interpretability."""

__version__ = "0.1.0"
