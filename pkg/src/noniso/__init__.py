"""Nonisotropic Gaussian diffusion over skeleton graphs, with a toy motion forecaster."""

__version__ = "0.1.0"
