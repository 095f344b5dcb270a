"""Offline planner for budget-constrained intervention requests.

Tabular machinery: transition counting, empirical success estimation,
usage/policy fixed-point iteration with reward binary search, a synthetic
object-search environment, and exact verification oracles.
"""

__version__ = "0.1.0"
