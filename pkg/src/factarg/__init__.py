"""Fact-grounded argument mining and control-coded argument generation."""

__version__ = "0.1.0"
