"""Frequency-domain latent blocks that can be merged or fused across modalities."""

__version__ = "0.1.0"
