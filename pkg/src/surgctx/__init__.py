"""Surgical context inference from object masks and grammar-based gesture translation."""

__version__ = "0.1.0"
