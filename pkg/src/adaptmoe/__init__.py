"""Adaptive top-1/top-2 mixture-of-experts training at desk scale."""

__version__ = "0.1.0"
