"""Disentangled point-cloud quality assessment at desk scale."""

__version__ = "0.1.0"
