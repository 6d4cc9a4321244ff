"""Block-wise few-shot landslide susceptibility prediction."""
__version__ = "0.1.0"
