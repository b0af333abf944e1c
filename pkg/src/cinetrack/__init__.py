"""Real-time target tracking and segmentation for grayscale cine sequences."""

__version__ = "0.1.0"
