"""Inherent Interpretability Score toolkit for stored vision embeddings."""

__version__ = "0.1.0"
