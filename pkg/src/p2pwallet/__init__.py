"""Offline peer-to-peer wallet payments over a two-party atomic commit."""

__version__ = "0.1.0"
