"""Memorization-aware machine unlearning benchmark for small vision models."""

__version__ = "0.1.0"
