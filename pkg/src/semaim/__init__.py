"""Semantic-aware autoregressive image modeling at desk scale."""

__version__ = "0.1.0"
