"""Diffusion-based metric depth estimation with field-of-view conditioning."""

__version__ = "0.1.0"
