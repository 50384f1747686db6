"""Hyperbolic graph condensation and random-walk analysis."""

__version__ = "0.1.0"
