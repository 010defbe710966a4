"""Serial mini-batch ensemble attack on pixel-to-pixel models."""

__version__ = "0.1.0"
