"""Federated optimisation simulator: FedAvg, FedProx and FedDane under heterogeneity."""

__version__ = "0.1.0"
