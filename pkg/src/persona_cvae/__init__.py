"""Memory-augmented CVAE for diverse persona-grounded dialogue generation."""

__version__ = "0.1.0"
