"""Desk-scale ML radio-coverage prediction: scenes, ray launching, UNet models."""

__version__ = "0.1.0"
