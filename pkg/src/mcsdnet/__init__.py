"""Spatiotemporal segmentation of convective systems in satellite image sequences."""
__version__ = "0.1.0"
