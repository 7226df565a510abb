"""amodal-forge: desk-scale amodal segmentation toolkit."""

__version__ = "0.1.0"
