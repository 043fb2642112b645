"""Trace-driven simulation of a spot-market virtual cluster broker."""

__version__ = "0.1.0"
