"""Comparative-logic text generation with contrastive seq2seq training."""

__version__ = "0.1.0"
