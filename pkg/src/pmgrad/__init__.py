"""Particle-MALA / Particle-mGRAD family of conditional SMC kernels."""

__version__ = "0.1.0"
