"""Learned non-linear loss aggregation with bi-level hypergradient schemes."""

__version__ = "0.1.0"
