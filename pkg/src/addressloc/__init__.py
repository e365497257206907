"""Image address localization at desk scale: synthetic cities, sub-street partition, contrastive alignment."""

__version__ = "0.1.0"
