"""Variational inference and learning for diffusion-process priors."""

__version__ = "0.1.0"
