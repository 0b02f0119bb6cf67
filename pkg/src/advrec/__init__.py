"""Adversarial perturbations of BPR matrix factorization: data, training, attacks, metrics."""

__version__ = "0.1.0"
