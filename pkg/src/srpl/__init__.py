"""Learnable-spectrum rotary position embeddings in a toy decoder transformer."""

__version__ = "0.1.0"
