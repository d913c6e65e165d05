"""Incremental non-Gaussian SLAM with clique-wise normalizing flows on a Bayes tree."""

__version__ = "0.1.0"
