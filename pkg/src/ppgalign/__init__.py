"""Paired PPG/ECG signal conditioning, contrastive encoder alignment, retrieval and probing."""

__version__ = "0.1.0"
