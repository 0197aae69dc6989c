"""Saak-transform image classification and adversarial-robustness experiments."""
__version__ = "0.1.0"
