"""Concept Activation Vector estimation and variance analysis."""

__version__ = "0.1.0"
