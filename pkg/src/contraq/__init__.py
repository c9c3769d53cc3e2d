"""Hydraulic force-control sandbox with contraction-metric safe RL."""

__version__ = "0.1.0"
