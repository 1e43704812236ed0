"""Training objective: cosine contrastive alignment, self-distillation
against a frozen teacher, and their weighted combination.

For a pair (e_s, e_t) with binary same-identity label y and margin m:

    contrastive = y * (1 - cos(e_s, e_t)) + (1 - y) * max(0, cos(e_s, e_t) - m)

The self-distillation term is 1 - cos(teacher(x_s), student(x_s)) and only
the student side receives gradient. The total is their convex combination
weighted by lambda; the batch reduction is the arithmetic mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, cosine_pairs, mean_all, relu, reshape
from .backbone import Model, forward
from .syndata import PairBatch


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.75
    margin: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0,1], got {self.lam}")
        if not 0.0 <= self.margin <= 1.0:
            raise ValueError(f"margin must be in [0,1], got {self.margin}")


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-D embeddings as a differentiable scalar."""
    d = a.data.size
    return reshape(cosine_pairs(reshape(a, (1, d)), reshape(b, (1, d))), ())


def contrastive_loss(e_s: Tensor, e_t: Tensor, y, margin: float = 0.0) -> Tensor:
    yv = float(y)
    if yv not in (0.0, 1.0):
        raise ValueError(f"label must be 0 or 1, got {y}")
    c = cosine(e_s, e_t)
    if yv == 1.0:
        return 1.0 - c
    return relu(c - margin)


def self_distillation_loss(e_teacher: Tensor, e_student: Tensor) -> Tensor:
    """1 - cos(teacher, student); pass a constant teacher embedding so
    gradient reaches only the student."""
    return 1.0 - cosine(e_teacher, e_student)


def total_loss(l_c, l_sdl, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0,1], got {lam}")
    return (1.0 - lam) * l_c + lam * l_sdl


def contrastive_batch(c: Tensor, labels: np.ndarray, margin: float) -> Tensor:
    """Mean contrastive loss over a vector of pair cosines and 0/1 labels."""
    y = Tensor(labels)
    not_y = Tensor(1.0 - labels)
    per_pair = y * (1.0 - c) + not_y * relu(c - margin)
    return mean_all(per_pair)


class BatchObjective(NamedTuple):
    total: Tensor
    l_contrastive: Tensor
    l_distill: Tensor


def batch_objective(
    student: Model, teacher: Model, batch: PairBatch, weights: LossWeights
) -> BatchObjective:
    """Mean per-sample total loss over a pair batch.

    Source images pass through both networks (the teacher as a frozen
    reference), target images through the student only. Teacher embeddings
    are recomputed every call. Source and target halves run as separate
    same-shaped forwards so a bit-identical teacher yields bit-identical
    reference embeddings, which the cosine op turns into an exactly-zero
    distillation gradient.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")

    e_s = forward(student, Tensor(batch.x_source))
    e_t = forward(student, Tensor(batch.x_target))
    l_c = contrastive_batch(cosine_pairs(e_s, e_t), batch.y, weights.margin)

    teacher_e = Tensor(forward(teacher, Tensor(batch.x_source)).data)
    l_sdl = mean_all(1.0 - cosine_pairs(teacher_e, e_s))

    total = total_loss(l_c, l_sdl, weights.lam)
    return BatchObjective(total, l_c, l_sdl)
