"""Reblurring-guided defocus deblurring trained on misaligned image pairs."""

__version__ = "0.1.0"
