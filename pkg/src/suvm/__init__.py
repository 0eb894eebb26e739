"""Structural unsupervised viewlets: part-aware object prototypes from unlabeled images."""

__version__ = "0.1.0"
