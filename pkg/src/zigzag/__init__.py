"""Zigzag weakly supervised detection: difficulty-ordered curriculum with feature masking."""

__version__ = "0.1.0"
