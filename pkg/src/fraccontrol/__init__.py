"""Optimal control of the fractional heat equation with box constraints."""

__version__ = "0.1.0"
