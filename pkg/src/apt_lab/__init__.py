"""Desk-scale adversarial post-training (APT) lab."""

__version__ = "0.1.0"
