"""L1-aware multilingual mispronunciation detection."""

__version__ = "0.1.0"
