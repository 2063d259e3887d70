"""Latent adversarial generator: diverse plausible high-resolution samples
conditioned on a low-resolution image, trained with a Wasserstein critic."""

__version__ = "0.1.0"
