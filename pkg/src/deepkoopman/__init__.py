"""Koopman-operator models of planar vehicle dynamics and linear MPC on top of them."""

__version__ = "0.1.0"
