"""Conditional normalizing flows trained as a boundary value problem in the condition."""

__version__ = "0.1.0"
