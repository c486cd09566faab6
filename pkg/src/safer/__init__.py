"""Uncertainty-aware treatment recommendation with conformal false-discovery control."""

__version__ = "0.1.0"
