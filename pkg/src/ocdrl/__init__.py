"""Offline policy learning with optimized clipped doubly robust estimation."""

__version__ = "0.1.0"
