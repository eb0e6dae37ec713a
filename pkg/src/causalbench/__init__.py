"""Benchmarking language-model causal predictions against interventional screens."""

__version__ = "0.1.0"
