"""Mask mining: retrain segmentation networks on their own error masks."""

__version__ = "0.1.0"
