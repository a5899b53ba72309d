"""Coupled query/key dynamics attention in a small numpy transformer."""

__version__ = "0.1.0"
