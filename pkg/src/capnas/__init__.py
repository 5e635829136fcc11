"""Data-free capacity scoring and search for Transformer architectures."""

__version__ = "0.1.0"
