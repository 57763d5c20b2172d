"""Align longitudinal clinical records with guideline pathways and score the results."""

__version__ = "0.1.0"
