"""Generative targeted transferable perturbations at desk scale."""

__version__ = "0.1.0"
