"""Prototype-guided grouping encoder for weakly supervised segmentation on synthetic scenes."""

__version__ = "0.1.0"
