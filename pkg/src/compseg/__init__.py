"""Complementary foreground/background lesion segmentation on a small numpy autograd."""

__version__ = "0.1.0"
