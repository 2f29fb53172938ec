"""Variational manifold learning of dynamic images from undersampled measurements."""

__version__ = "0.1.0"
