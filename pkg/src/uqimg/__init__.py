"""Ensembled generative posterior sampling with decomposed uncertainty and conformal calibration."""

__version__ = "0.1.0"
