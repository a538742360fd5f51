"""Screenplay-driven long-video remaking with verified, reference-conditioned generation."""

__version__ = "0.1.0"
