"""Few-shot anchored prototypical learning on noisy web-style data."""

__version__ = "0.1.0"
