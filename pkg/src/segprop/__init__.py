"""Iterative flow-based semantic label propagation for video."""
__version__ = "0.1.0"
