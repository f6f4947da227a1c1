"""Bilinear attention between question and visual channels on a small numpy autodiff core."""

__version__ = "0.1.0"
