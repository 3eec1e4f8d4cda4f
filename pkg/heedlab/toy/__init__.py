"""
Density-weighted residual alignment laboratory.

Desk-scale models, data and training schedule: an all-attention teacher, a
3:1 mixer/attention hybrid student built from it, a synthetic dense-recall
corpus and the three-stage distillation schedule.
"""
from .model import ToyConfig, ToyModel, build_teacher, forward_with_residuals, hybridize  # noqa: F401
