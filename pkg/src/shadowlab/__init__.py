"""Numerical laboratory for constructive shadowing on Axiom A torus maps."""

__version__ = "0.1.0"
