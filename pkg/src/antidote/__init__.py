"""Attention-based dynamic feature-map pruning for small CNNs."""

__version__ = "0.1.0"
