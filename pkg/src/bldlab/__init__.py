"""Blending-aware latent diffusion inpainting laboratory."""
__version__ = "0.1.0"
