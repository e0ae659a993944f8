"""Adaptive score-based diffusion denoising of 3-D point clouds."""
