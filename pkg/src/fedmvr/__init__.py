"""Federated learning with momentum-based variance reduction and adaptive local learning rates."""

__version__ = "0.1.0"
