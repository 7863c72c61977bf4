"""Implicit-bias variational inference: expected-loss training of Gaussian variational models."""

__version__ = "0.1.0"
