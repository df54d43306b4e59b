"""Binary neural network training toolkit with a bit-packed inference path."""

__version__ = "0.1.0"
