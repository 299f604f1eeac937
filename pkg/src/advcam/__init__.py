"""Adversarial climbing for sharper, more complete class activation maps."""

__version__ = "0.1.0"
