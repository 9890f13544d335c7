"""Rotation-aware detection with a differentiable derotation layer."""

__version__ = "0.1.0"
