"""Transformer detection head for LiDAR-camera fusion with a numpy autodiff core."""

__version__ = "0.1.0"
