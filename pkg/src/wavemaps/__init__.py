"""Numerical laboratory for equivariant wave maps and their multi-bubble dynamics."""

__version__ = "0.1.0"
