"""Active XML document repository with embedded ECA rules."""

__version__ = "0.1.0"
