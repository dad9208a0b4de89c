"""Desk-scale set-prediction segmentation toolkit."""

__version__ = "0.1.0"
