"""Causal discovery for piecewise-stationary multivariate time series.

Jointly infers the number of regimes, per-step regime labels, and one
temporal causal graph (instantaneous + lagged edges) per regime, under
heteroscedastic or non-Gaussian noise, by Bayesian EM over an evidence
lower bound.
"""

__version__ = "0.1.0"
