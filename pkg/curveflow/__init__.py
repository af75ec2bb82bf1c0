"""Numerical lab for curve-shrinking flow inside an ambient Ricci flow."""

__version__ = "0.1.0"
