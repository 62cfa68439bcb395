"""Multimodal speech recognition under random word masking."""

__version__ = "0.1.0"
