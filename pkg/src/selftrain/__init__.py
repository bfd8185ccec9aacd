"""Self-training plus pre-training experiments on a small numpy transformer."""

__version__ = "0.1.0"
