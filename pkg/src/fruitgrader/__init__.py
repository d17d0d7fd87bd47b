"""Fruit detection and grading: cascade detector + residual CNN classifiers."""

__version__ = "0.1.0"

from .imaging import BBox, Image, IntegralImage

__all__ = ["BBox", "Image", "IntegralImage", "__version__"]
