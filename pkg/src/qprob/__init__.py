"""Exact and variance-reduced estimation of long-range probabilistic queries
for sequence models, marked point processes and jump processes."""

__version__ = "0.1.0"
