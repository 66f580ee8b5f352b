"""Calibrating a freeway microsimulator against aggregated detector data."""

__version__ = "0.1.0"
