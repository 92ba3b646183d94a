"""Tabular imitation-learning lab for finite-horizon MDPs."""

__version__ = "0.1.0"
