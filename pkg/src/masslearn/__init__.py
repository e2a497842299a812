"""Classifiers trained on a representation-entropy objective, with the
supporting pieces exposed as a library: a reverse-mode autodiff tape, MLPs
with exact Jacobian log-determinants, class-conditional Gaussian mixture
heads, information estimators, evaluation metrics, and dataset utilities.
"""

__version__ = "0.1.0"
