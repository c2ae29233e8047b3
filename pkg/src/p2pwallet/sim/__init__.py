"""Fault-injecting simulator and exhaustive explorer."""
