"""segloop: human-in-the-loop segmentation annotation with concurrent CPU training."""

__version__ = "0.1.0"
