"""Streaming disfluency tagging with a learned, dynamic lookahead."""
__version__ = "0.1.0"
