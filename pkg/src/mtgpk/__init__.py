"""Multitask Gaussian processes from infinitely wide multitask Bayesian networks."""
