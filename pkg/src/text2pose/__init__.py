"""Text-conditioned 2D whole-body pose sequence generation."""

__version__ = "0.1.0"
