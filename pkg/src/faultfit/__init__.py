"""Fault injection training for dense networks on simulated fixed-point hardware."""

__version__ = "0.1.0"
