"""Desk-scale cross-modal face embedding adaptation toolkit.

A pretrained source-modality embedding network is adapted to a target
modality by unfreezing selected parameter groups and minimizing a weighted
sum of a cosine contrastive loss and a self-distillation loss against a
frozen copy of itself. Everything runs on a small float64 autodiff engine
so gradients can be verified against finite differences.
"""

from .autodiff import Tensor, backward, finite_diff_check
from .backbone import BackboneConfig, Model, ParameterGroup, build, forward

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_check",
    "BackboneConfig",
    "Model",
    "ParameterGroup",
    "build",
    "forward",
]
