"""Computational design of shape-morphing and locomoting musculoskeletal robots."""

__version__ = "0.1.0"
