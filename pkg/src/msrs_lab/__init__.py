"""Desk-scale sparse-training lab: mask-logit training with two temperatures
plus GMP, SET, RigL and ERK baselines on small residual MLPs."""

__version__ = "0.1.0"
