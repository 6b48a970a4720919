"""Desk-scale joint camera + LiDAR world model built on a small numpy autodiff engine."""

__version__ = "0.1.0"
