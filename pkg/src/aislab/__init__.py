"""Approximate information states: tabular bounds, IPMs and a small RL stack."""

__version__ = "0.1.0"
