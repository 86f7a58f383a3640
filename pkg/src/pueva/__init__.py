"""Flexible-rate point cloud upsampling by edge-vector-based affine combination."""

__version__ = "0.1.0"
