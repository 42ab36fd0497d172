"""Numerical laboratory for fourth-order parabolic and hyperbolic MEMS equations."""

__version__ = "0.1.0"
