"""Latent-action reinforcement learning for slate recommendation."""

__version__ = "0.1.0"
