"""Cross-modal virtual sensing: flame-image reconstruction from acoustic pressure."""

__version__ = "0.1.0"
