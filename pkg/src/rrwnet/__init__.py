"""Recursive refinement networks for retinal artery/vein segmentation."""

__version__ = "0.1.0"
