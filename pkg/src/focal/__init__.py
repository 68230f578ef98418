"""Doubly robust estimation of functional conditional average treatment effects."""

__version__ = "0.1.0"
