"""Desk-scale causally regularized image tokenization with a scaling-analysis harness."""

__version__ = "0.1.0"
