"""Bayesian calibration of neural SDE stochastic-volatility models."""

__version__ = "0.1.0"
