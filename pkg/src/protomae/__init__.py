"""Masked point-cloud autoencoder with prototype-based component grouping."""

__version__ = "0.1.0"
