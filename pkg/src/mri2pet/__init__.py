"""Conditional diffusion translation of MRI to PET with a dual-arm UNet."""

__version__ = "0.1.0"
