"""Saliency-guided longitudinal difference VQA on a numpy autodiff engine."""

__version__ = "0.1.0"
