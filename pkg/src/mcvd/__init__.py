"""Masked conditional video diffusion: one denoiser for future/past prediction,
unconditional generation and interpolation of short frame blocks."""

__version__ = "0.1.0"
