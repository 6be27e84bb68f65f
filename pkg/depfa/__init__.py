"""Dependent feature allocation on Gaussian Markov random fields."""

__version__ = "0.1.0"
