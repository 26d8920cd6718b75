"""Bayesian inference for a heat-conduction inverse problem with a learned GAN prior."""

__version__ = "0.1.0"
