"""Domain-decomposed uncertainty propagation with conditional triangular flows."""

__version__ = "0.1.0"
