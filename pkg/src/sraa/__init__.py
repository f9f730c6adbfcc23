"""Semantic-guided relation alignment and adaptation for incremental few-shot segmentation.

A desk-scale implementation: float64 autodiff, a small conv encoder, the SRAA
losses, a step-indexed training engine, a synthetic benchmark and metrics.
"""

__version__ = "0.1.0"
