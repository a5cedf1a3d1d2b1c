"""Reward-gradient alignment of toy video diffusion models."""

__version__ = "0.1.0"
