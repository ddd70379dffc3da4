"""Context-guided coarse-to-fine GAN for single image dehazing."""

__version__ = "0.1.0"
