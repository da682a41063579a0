"""Spatio-temporal quantile curriculum training for multi-quantile forecasters."""

__version__ = "0.1.0"
