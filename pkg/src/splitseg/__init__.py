"""Split semantic segmentation: feature codec, joint feature-and-task decoder, analysis tools."""

__version__ = "0.1.0"
