"""Retina screening pipeline: preprocessing, CNN grading, kappa evaluation,
class-balanced training, and left/right-eye post-processing."""

__version__ = "0.1.0"
