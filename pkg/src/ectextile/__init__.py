"""Elastic Context toolkit for simulated textile force forecasting."""

__version__ = "0.1.0"
