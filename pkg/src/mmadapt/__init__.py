"""Frozen-backbone multimodal adapters at desk scale."""

__version__ = "0.1.0"
