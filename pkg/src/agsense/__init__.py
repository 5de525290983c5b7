"""Aerial-ground air-quality sensing simulator and data-processing toolkit."""

__version__ = "0.1.0"
