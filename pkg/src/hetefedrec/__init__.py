"""Federated recommendation with heterogeneous model sizes."""

__version__ = "0.1.0"
