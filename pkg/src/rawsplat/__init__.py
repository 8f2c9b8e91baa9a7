"""Noise-robust 3D gaussian splatting on raw sensor images."""

__version__ = "0.1.0"
