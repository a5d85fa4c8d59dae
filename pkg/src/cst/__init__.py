"""Few-shot classification and segmentation with correlation transformers."""

__version__ = "0.1.0"
