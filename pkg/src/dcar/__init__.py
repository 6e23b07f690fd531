"""Dual-prompt adaptation of a frozen miniature dual encoder for image-text retrieval."""

__version__ = "0.1.0"
