"""Airway tree topology toolkit: skeletons, anatomy-aware labels, breakage attention and repair, metrics, losses."""

__version__ = "0.1.0"
