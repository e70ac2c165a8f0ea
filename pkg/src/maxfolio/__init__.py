"""Tune MaxSAT solvers, validate and score their runs, and build portfolios from the tuning residue."""

__version__ = "0.1.0"
