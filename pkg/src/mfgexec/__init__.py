"""Equilibria of the mean-field game of optimal trade execution."""

__version__ = "0.1.0"
