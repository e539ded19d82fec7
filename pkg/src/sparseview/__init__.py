"""Sparse-view 3D reconstruction on voxel grids with consensus-fused enhancer
supervision and UCB viewpoint selection."""

__version__ = "0.1.0"
