"""Gated self-supervised learning: quadrant-local pretext tasks weighted by a softmax gate."""

__version__ = "0.1.0"
