"""Bilinear maze policy with weight-based eigenfilter interpretability."""

__version__ = "0.1.0"
