"""Volumetric 3D keypoint localization with coarse-to-fine depth supervision."""

__version__ = "0.1.0"
