"""Covert-network node classification on weekly graph snapshots."""

__version__ = "0.1.0"
