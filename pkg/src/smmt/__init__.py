"""Desk-scale Siamese motion-mamba tracker for thermal-infrared sequences."""

__version__ = "0.1.0"
