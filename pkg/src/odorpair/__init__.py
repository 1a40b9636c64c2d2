"""Odor-label prediction for pairs of aroma chemicals."""

__version__ = "0.1.0"
