"""Reward-free curriculum learning for robust world models on tabular environment families."""

__version__ = "0.1.0"
