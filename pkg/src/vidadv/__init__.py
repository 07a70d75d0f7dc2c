"""Adversarial attacks and defences for video action classifiers on a numpy autodiff stack."""

__version__ = "0.1.0"
