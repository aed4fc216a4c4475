"""Desk-scale continuous layout editing with a toy diffusion model."""

__version__ = "0.1.0"
