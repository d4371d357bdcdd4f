"""Classify images from captioner text and fuse with image classifiers."""

__version__ = "0.1.0"
