"""Self-supervised monocular depth with per-instance rigid motion."""

__version__ = "0.1.0"
