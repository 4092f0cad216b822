"""Explainable knowledge-graph agent for interactive fiction games."""

__version__ = "0.1.0"
