"""Unsupervised latent-representation change detection for raster tile pairs."""

__version__ = "0.1.0"
