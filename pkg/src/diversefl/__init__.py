"""Federated learning simulator with enclave-guided per-client fault filtering."""

__version__ = "0.1.0"
