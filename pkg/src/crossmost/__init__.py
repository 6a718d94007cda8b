"""Cross-modal self-training for zero-shot point cloud classification on synthetic data."""

__version__ = "0.1.0"
