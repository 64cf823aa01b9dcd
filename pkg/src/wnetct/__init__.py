"""Dual-domain (image / spatial-frequency) U-net cascades for low-dose CT enhancement."""

__version__ = "0.1.0"
