"""Weakly-supervised temporal action localization with Gaussian frame selection."""

__version__ = "0.1.0"
