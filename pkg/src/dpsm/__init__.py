"""Two-tower convolutional semantic matching for POI retrieval."""

__version__ = "0.1.0"
