"""Noise-interpretation verification toolkit: tensor algebra, SDE and Fokker-Planck solvers, experiments."""

__version__ = "0.3.0"
