"""Two-pass segmented encoder with a cross-segment memory table."""

__version__ = "0.1.0"
