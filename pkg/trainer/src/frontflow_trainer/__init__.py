"""Surrogate training for the moving-boundary filling simulator."""

__version__ = "0.1.0"
