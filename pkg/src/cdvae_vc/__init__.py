"""Cross-domain VAE voice conversion: frame-wise, fully convolutional and F0-conditioned variants."""

__version__ = "0.1.0"
