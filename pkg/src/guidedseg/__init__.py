"""Few-shot binary segmentation with self-guided support vectors and cross-guided K-shot fusion."""

__version__ = "0.1.0"
