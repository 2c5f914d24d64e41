"""Similarity-aware class-agnostic counting on toy synthetic tasks."""

__version__ = "0.1.0"
