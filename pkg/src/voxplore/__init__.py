"""Deterministic multi-robot voxel-world exploration simulator."""

__version__ = "0.1.0"
