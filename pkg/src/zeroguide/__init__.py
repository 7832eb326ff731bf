"""Zero-guidance segmentation: over-segment, encode, label and merge image regions."""

__version__ = "0.1.0"
