"""Whittle-like index allocation for pooled CDN server clusters."""

__version__ = "0.1.0"
