"""Streaming driving-video world model built on hierarchical temporal feature transfer."""

__all__ = ["__version__"]
__version__ = "0.1.0"
