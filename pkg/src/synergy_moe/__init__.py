"""Sparse mixture-of-experts toy multimodal model with cross-view synergy objectives."""

__version__ = "0.1.0"
