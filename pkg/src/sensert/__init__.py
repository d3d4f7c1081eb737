"""Desk-scale real-time smart-building sensor streaming stack."""

__version__ = "0.1.0"
