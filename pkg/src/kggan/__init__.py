"""Knowledge-guided conditional GAN at desk scale, on numpy only."""

__version__ = "0.1.0"
