"""Coordinate-network slide representation with per-slide hash grids."""

__version__ = "0.1.0"
