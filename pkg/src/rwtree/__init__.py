"""Randomly biased walks on Galton-Watson trees: regimes, local times and inference."""

__version__ = "0.1.0"
