"""Cycle-consistent adversarial autoencoders for unsupervised text style transfer."""

__version__ = "0.1.0"
