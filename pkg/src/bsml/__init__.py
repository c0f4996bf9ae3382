"""Bayesian sparse multi-response regression with horseshoe priors."""

__version__ = "0.1.0"
