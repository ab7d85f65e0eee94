"""Simulation and numerics for the thinned Levy process of critical rank-1 random graphs."""
__version__ = "0.1.0"
