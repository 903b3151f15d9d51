"""Desk-scale end-to-end speech translation testbed."""

__version__ = "0.1.0"
