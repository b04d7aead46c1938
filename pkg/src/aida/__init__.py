"""Isolation scores over distance profiles (AIDA) and simulated-annealing
feature explanations (TIX)."""

__version__ = "0.1.0"
