"""Visibility-aware uncertainty for voxel radiance fields and next-best-view planning."""

__version__ = "0.1.0"
