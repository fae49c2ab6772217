"""Exact full-gradient evaluation of stochastic purification defenses."""

__version__ = "0.1.0"
