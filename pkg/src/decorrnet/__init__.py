"""Decorrelated backpropagation in numpy."""

__version__ = "0.1.0"
