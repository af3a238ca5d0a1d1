"""Diffusion in fast cellular flows: Monte Carlo, event logging, cell problems and closed-form bounds."""

__version__ = "0.1.0"
