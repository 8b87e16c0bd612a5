"""Interspecies facial-keypoint transfer through supervised TPS warping."""

__version__ = "0.1.0"
