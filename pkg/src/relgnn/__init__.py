"""Semantic-relationship GGNN for multi-label facial action unit recognition."""

__version__ = "0.1.0"
