"""Natural-language descriptions of transformer features and their evaluation."""

__version__ = "0.1.0"
