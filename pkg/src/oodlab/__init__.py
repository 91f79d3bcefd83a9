"""Synthetic benchmark for shape versus intensity shortcuts under distribution shift."""

__version__ = "0.1.0"
