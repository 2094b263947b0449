"""Privacy-preserving image retrieval over format-compliant encrypted JPEGs."""

__version__ = "0.1.0"
