"""Learned sparsification of long-term localization maps."""

__version__ = "0.1.0"
