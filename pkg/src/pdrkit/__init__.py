"""Linearised anisotropic conductivity reconstruction from power-density data."""

__version__ = "0.1.0"
