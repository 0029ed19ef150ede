"""Cascading cooperative multi-agent on-ramp merging."""

__version__ = "0.1.0"
