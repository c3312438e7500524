"""Quantum token security bounds, simulation and protocol tooling."""

__version__ = "0.1.0"
