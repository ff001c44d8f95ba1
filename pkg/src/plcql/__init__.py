"""Offline multi-agent conservative Q-learning with a learned partial action replacement policy."""

__version__ = "0.1.0"
