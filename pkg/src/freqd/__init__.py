"""Frequency-reweighted feature distillation for embedding recommenders."""

__version__ = "0.1.0"
