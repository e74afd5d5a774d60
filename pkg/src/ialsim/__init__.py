"""Influence-augmented local simulators for fast policy training."""

__version__ = "0.1.0"
