"""Numerical laboratory for controlled diffusions with L_d-dominated drift."""

__version__ = "0.1.0"
