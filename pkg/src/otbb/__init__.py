"""Discrete dynamical optimal transport: models, solver and verification."""

__version__ = "0.1.0"
