"""Test-risk dynamics under gradient flow and stochastic gradient flow."""

__version__ = "0.1.0"
