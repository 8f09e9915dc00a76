"""Windowed self-attention over 2D feature maps, with hand-written gradients."""

__version__ = "0.1.0"
