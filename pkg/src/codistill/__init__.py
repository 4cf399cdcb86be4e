"""Desk-scale online collaborative distillation between a convolutional and
an attention-based segmentation student."""

__version__ = "0.1.0"
