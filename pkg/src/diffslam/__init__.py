"""Differentiable dense RGB-D SLAM building blocks."""

__version__ = "0.1.0"
