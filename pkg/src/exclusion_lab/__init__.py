"""Boundary-driven exclusion processes: exact, stochastic and PDE layers."""
