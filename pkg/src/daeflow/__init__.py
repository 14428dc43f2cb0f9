"""Learning dynamics and sampling of a denoising-autoencoder flow model.

Finite-dimensional simulator plus its asymptotic summary-statistic theory.
"""
__version__ = "0.1.0"
