"""Encoder-space machine unlearning for image-to-image models, at desk scale."""
__version__ = "0.1.0"
