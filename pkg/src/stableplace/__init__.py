"""Diffusion-based generation of stable 6-DoF block placements."""

__version__ = "0.1.0"
