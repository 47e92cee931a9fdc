"""Desk-scale egocentric environment-memory laboratory."""

__version__ = "0.1.0"
