"""Weighted (soft-killing) particle control and its mean-field limit on the torus."""

__version__ = "0.1.0"
