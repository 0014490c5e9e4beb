"""Residual networks in the depth- and width-stable parameterization, their
kernel observables, and the solvable infinite-width-and-depth limits."""

__version__ = "0.1.0"
