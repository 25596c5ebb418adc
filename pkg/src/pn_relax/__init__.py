"""Numerical laboratory for the relaxation of the dynamic Peierls-Nabarro model."""

__version__ = "0.1.0"
