"""Pessimistic actor-critic for offline RL with perturbed linear policies."""
__version__ = "0.1.0"
