"""Adversarial estimation of linear operator equations with ReLU networks."""

__version__ = "0.1.0"
