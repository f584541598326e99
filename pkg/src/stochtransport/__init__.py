"""Desk-scale numerics for exact controllability of stochastic transport equations."""
__version__ = "0.1.0"
