"""Variable-rate learned compression laboratory."""

__version__ = "0.1.0"
