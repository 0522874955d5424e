"""Tokenization configurations for clinical event streams and the statistics used to compare them."""

__version__ = "0.1.0"
