"""Meta-learned conditional VAE + GAN feature synthesis for zero-shot learning."""

__version__ = "0.1.0"
