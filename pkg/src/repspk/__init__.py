"""Structural re-parameterization of multi-branch speaker-embedding CNNs."""

__version__ = "0.1.0"
