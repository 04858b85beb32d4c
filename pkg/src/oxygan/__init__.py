"""Conditional-GAN RGB to tissue-oxygen-saturation translation toolkit."""

__version__ = "0.1.0"
