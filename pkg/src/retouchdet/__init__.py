"""Facial retouching detection with texture descriptors and deep face representations."""

__version__ = "0.1.0"
