"""Diffusion autoencoder + group-supervised latent autoencoder on a procedural shapes dataset."""

__version__ = "0.1.0"
