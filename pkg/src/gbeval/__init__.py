"""Evaluation toolkit for grain-boundary segmentation predictions."""

__version__ = "0.1.0"
