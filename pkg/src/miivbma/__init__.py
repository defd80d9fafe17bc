"""MIIV-2SLS and MIIV-2SBMA estimation for structural equation models."""

__version__ = "0.1.0"
