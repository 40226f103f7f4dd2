"""Federated learning simulator for heterogeneous institutional data."""

__version__ = "0.1.0"
