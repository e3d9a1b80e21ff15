"""Numerical laboratory for the disordered Holstein model on finite lattices."""

__version__ = "0.1.0"
