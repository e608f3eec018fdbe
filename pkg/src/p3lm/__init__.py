"""Probabilistically permuted prophet decoding on a small transformer encoder-decoder."""

__version__ = "0.1.0"
