"""Fitting continuous piecewise-linear functions to scattered data with
difference-of-convex mixed-integer programs."""

__version__ = "0.1.0"
