"""Multi-dimensional neighborhood attention with naive, tiled and fused strategies."""

__version__ = "0.1.0"
