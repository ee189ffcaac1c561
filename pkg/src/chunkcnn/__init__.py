"""Chunked-spectrogram CNNs for speech activity detection and speaker identification."""

__version__ = "0.1.0"
