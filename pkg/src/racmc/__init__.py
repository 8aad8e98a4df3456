"""Residual-aware compensation network with multi-granularity constraints,
built on a small float64 autodiff engine."""

__version__ = "0.1.0"
