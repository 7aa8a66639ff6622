"""Numerical laboratory for collapsing Kaehler-Ricci flow on elliptic surfaces."""

__version__ = "0.1.0"
