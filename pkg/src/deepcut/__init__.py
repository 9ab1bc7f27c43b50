"""Contrastive machine unlearning for token classifiers, with baselines and a
benchmark harness."""

__version__ = "0.1.0"
