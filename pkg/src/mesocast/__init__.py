"""Mesoscale highway traffic forecasting toolkit."""

__version__ = "0.1.0"
