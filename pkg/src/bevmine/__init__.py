"""Sparse-supervision pseudo-label mining lab for anchor-based BEV detection."""

__version__ = "0.1.0"
