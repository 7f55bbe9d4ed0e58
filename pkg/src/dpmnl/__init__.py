"""Dirichlet process mixture multinomial logit estimation."""
__version__ = "0.1.0"
