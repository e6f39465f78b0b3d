"""Homoglyph (name-spoofing) detection with a Siamese CNN and a KD-Tree forest."""

__version__ = "0.1.0"
