"""Multi-view stereo pseudo-label engine."""

__version__ = "0.1.0"
