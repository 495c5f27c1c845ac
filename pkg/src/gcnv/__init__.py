"""Sparse segmentation on nonvoid voxels: voxelization, tri-directional window attention and metrics."""

__version__ = "0.1.0"
