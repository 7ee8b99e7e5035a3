"""Streaming simultaneous speech-to-text translation at desk scale."""

__version__ = "0.1.0"
