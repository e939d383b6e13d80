"""Factorized shared/unique post-training lab for a miniature unified multimodal model."""

__version__ = "0.1.0"
