"""Incremental TSDF/ESDF voxel mapping."""

__version__ = "0.1.0"
