"""Hierarchical federated learning simulator for crop yield prediction."""

__version__ = "0.1.0"
