"""Solvers for the APT-vs-DIFT stochastic game."""
