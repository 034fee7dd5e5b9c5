"""Learned motion primitives from jerk-optimal control problems."""

__version__ = "0.1.0"
