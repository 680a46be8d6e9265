"""Deep distance transform segmentation toolkit."""
__version__ = "0.1.0"
