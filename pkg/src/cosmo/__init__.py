"""Desk-scale multimodal split-LM training and data-curation toolkit."""

__version__ = "0.1.0"
