"""Spatio-temporal urban knowledge graph embedding for next-PoI prediction."""

__version__ = "0.1.0"
