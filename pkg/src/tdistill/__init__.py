"""Deterministic desk-scale distillation with temporal supervision."""

__version__ = "0.1.0"
