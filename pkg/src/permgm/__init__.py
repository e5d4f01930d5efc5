"""Deep graph matching with permutation loss and cross-graph embedding."""

__version__ = "0.1.0"
