"""Egocentric hand-motion toolkit."""

__version__ = "0.1.0"
