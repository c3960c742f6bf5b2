"""Desk-scale federated learning simulator with a recurrent early-exit transformer."""

__version__ = "0.1.0"
