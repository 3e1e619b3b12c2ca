"""Desk-scale wafer-defect knowledge-query pipeline."""

__version__ = "0.1.0"
