"""Decoupled content/degradation LR data generation for real-world super-resolution."""

__version__ = "0.1.0"
