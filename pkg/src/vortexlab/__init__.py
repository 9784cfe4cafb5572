"""Desk-scale laboratory for mean-field particle systems on the 2-torus.

Simulates interacting particle SDEs (bounded and Biot-Savart kernels),
solves the associated mean-field PDE pseudo-spectrally, and validates the
Gaussian fluctuation limit against its Ornstein-Uhlenbeck covariance.
"""

__version__ = "0.1.0"
