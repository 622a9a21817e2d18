"""Estimation-augmented locomotion on a planar biped, with saliency analysis of the learned estimates."""

__version__ = "0.1.0"
