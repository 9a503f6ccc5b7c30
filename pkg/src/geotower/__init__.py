"""Geo-aware location embeddings for housing recommendation."""

__version__ = "0.1.0"
