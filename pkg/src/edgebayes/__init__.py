"""Approximate Bayesian posterior ensembles for small MLPs at edge scale."""

__version__ = "0.1.0"
