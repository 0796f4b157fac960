"""Simulation and analysis tools for a two-layer segmented cantilever RF microtrap."""

__version__ = "0.1.0"
