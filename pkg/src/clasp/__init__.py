"""Desk-scale contrastive alignment of block-pushing behavior and language."""

__version__ = "0.1.0"
