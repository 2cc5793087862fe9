"""Scale-style test-time augmentation for instance segmentation."""

__version__ = "0.1.0"
