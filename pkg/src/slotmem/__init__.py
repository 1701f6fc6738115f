"""Slot-memory dialogue state tracking: operation prediction + selective value generation."""

__version__ = "0.1.0"
