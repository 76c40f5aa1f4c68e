"""Intra-layer recurrence laboratory for small decoder-only transformers."""

__version__ = "0.1.0"
