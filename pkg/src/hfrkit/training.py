"""Source-modality pretraining and cross-modal adaptation.

Adaptation freezes a teacher copy of the pretrained model, partitions a
student copy so only the selected layer groups train, then minimizes the
weighted contrastive + self-distillation objective with Adam over sampled
cross-modal pair batches. Only the student is kept afterwards.

An epoch is one pass of ceil(n_train_pairs / batch_size) sampled batches,
with n_train_pairs = 2 * n_train_ids * samples_per_id: every training
sample anchors one positive-role and one negative-role pair draw per epoch
(pair sampling is stochastic, never an exhaustive enumeration).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, cosine_pairs
from .backbone import BackboneConfig, Model, build, forward
from .losses import LossWeights, batch_objective, contrastive_batch
from .metrics import (
    DEFAULT_FAR_TARGETS,
    EvalReport,
    aggregate_folds,
    eer,
    evaluate_scores,
    score_matrix,
)
from .partition import AdaptConfig, PartitionReport, frozen_mismatches, partition
from .syndata import SOURCE, TARGET, Dataset, sample_pairs

PRETRAIN_LR = 3e-3  # from-scratch pretraining; the adaptation rate stays 1e-4


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite."""


@dataclass(frozen=True)
class Seeds:
    data: int = 42
    init: int = 42
    sampler: int = 42


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.75
    margin: float = 0.0
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    adapt: AdaptConfig = field(default_factory=lambda: AdaptConfig.from_preset("LN,ST"))
    seeds: Seeds = field(default_factory=Seeds)
    positive_fraction: float = 0.5


@dataclass
class TrainLog:
    records: list = field(default_factory=list)  # (step, l_c, l_sdl, l_total)
    wall_time: float = 0.0
    partition_report: PartitionReport | None = None

    def append(self, step: int, l_c: float, l_sdl: float, l_total: float) -> None:
        self.records.append((step, l_c, l_sdl, l_total))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "l_c", "l_sdl", "l_total"])
            for row in self.records:
                writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


class Adam:
    """Bias-corrected Adam over the trainable tensors, no weight decay.

    Moment buffers exist only for the tensors handed in; the update is
    lr * m_hat / (sqrt(v_hat) + eps), so a zero gradient moves nothing and
    leaves the moments at exactly zero.
    """

    def __init__(self, tensors, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.tensors]
        self.v = [np.zeros_like(p.data) for p in self.tensors]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.tensors, self.m, self.v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient on {p.name or 'parameter'}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.tensors:
            p.zero_grad()


def steps_per_epoch(n_train_ids: int, samples_per_id: int, batch_size: int) -> int:
    n_train_pairs = 2 * n_train_ids * samples_per_id
    return max(1, int(np.ceil(n_train_pairs / batch_size)))


def pretrain_source(
    config: BackboneConfig,
    dataset: Dataset,
    epochs: int,
    seed: int,
    train_ids=None,
    batch_size: int = 32,
    positive_fraction: float = 0.5,
    lr: float = PRETRAIN_LR,
) -> Model:
    """Train every parameter with the cosine contrastive objective on
    source-source pairs (both embeddings from the source modality)."""
    ids = sorted(train_ids) if train_ids is not None else list(range(dataset.n_ids))
    if len(ids) < 2:
        raise ValueError("pretraining needs at least 2 identities")
    model = build(config, seed)
    opt = Adam(model.tensors(), lr)
    total_steps = epochs * steps_per_epoch(len(ids), dataset.samples_per_id, batch_size)
    for step in range(total_steps):
        batch = sample_pairs(
            dataset,
            batch_size,
            positive_fraction,
            rng_seed=[seed, 11, step],
            ids=ids,
            modalities=(SOURCE, SOURCE),
        )
        e_a = forward(model, Tensor(batch.x_source))
        e_b = forward(model, Tensor(batch.x_target))
        loss = contrastive_batch(cosine_pairs(e_a, e_b), batch.y, margin=0.0)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"pretraining loss became {value} at step {step}")
        backward(loss)
        opt.step()
        opt.zero_grad()
    return model


def adapt(pretrained: Model, dataset: Dataset, config: TrainConfig, train_ids=None):
    """Adapt a pretrained model to the target modality.

    Returns (student model, TrainLog). The teacher copy is discarded; the
    student carries every frozen parameter bit-identical to the input.
    """
    ids = sorted(train_ids) if train_ids is not None else list(range(dataset.n_ids))
    if len(ids) < 2:
        raise ValueError("adaptation needs at least 2 identities")
    started = time.perf_counter()

    teacher = pretrained.copy()
    for p in teacher.params:
        p.tensor.requires_grad = False
        p.tensor.grad = None
    teacher_bytes = [p.tensor.data.tobytes() for p in teacher.params]

    student = pretrained.copy()
    report = partition(student, config.adapt)
    weights = LossWeights(config.lam, config.margin)
    opt = Adam([p.tensor for p in student.trainable()], config.lr)

    log = TrainLog(partition_report=report)
    total_steps = config.epochs * steps_per_epoch(len(ids), dataset.samples_per_id, config.batch_size)
    for step in range(total_steps):
        batch = sample_pairs(
            dataset,
            config.batch_size,
            config.positive_fraction,
            rng_seed=[config.seeds.sampler, 13, step],
            ids=ids,
        )
        obj = batch_objective(student, teacher, batch, weights)
        value = obj.total.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"adaptation loss became {value} at step {step}")
        backward(obj.total)
        opt.step()
        opt.zero_grad()
        log.append(step, obj.l_contrastive.item(), obj.l_distill.item(), value)

    log.wall_time = time.perf_counter() - started
    bad = frozen_mismatches(pretrained, student, config.adapt)
    if bad:
        raise RuntimeError(f"frozen parameters changed during adaptation: {bad[:5]}")
    for p, original in zip(teacher.params, teacher_bytes):
        if p.tensor.data.tobytes() != original:
            raise RuntimeError(f"teacher parameter {p.name} mutated during adaptation")
    return student, log


# ---------------------------------------------------------------------------
# protocol evaluation
# ---------------------------------------------------------------------------

def _protocol_items(dataset: Dataset, ids, protocol: str):
    """(gallery items, probe items) for a verification protocol.

    cross:  source gallery vs target probes, all samples on both sides.
    source: source vs source, disjoint sample halves per identity.
    """
    ids = sorted(ids)
    spi = dataset.samples_per_id
    if protocol == "cross":
        gallery = [(i, SOURCE, s) for i in ids for s in range(spi)]
        probe = [(i, TARGET, s) for i in ids for s in range(spi)]
    elif protocol == "source":
        half = max(1, spi // 2)
        gallery = [(i, SOURCE, s) for i in ids for s in range(half)]
        probe = [(i, SOURCE, s) for i in ids for s in range(half, spi)]
    else:
        raise ValueError(f"unknown protocol {protocol!r}; use 'cross' or 'source'")
    return gallery, probe


def embed_items(model: Model, dataset: Dataset, items, batch_size: int = 64) -> np.ndarray:
    chunks = []
    for start in range(0, len(items), batch_size):
        images = dataset.batch_images(items[start : start + batch_size])
        chunks.append(forward(model, Tensor(images)).data)
    return np.concatenate(chunks, axis=0)


def evaluate_protocol(
    model: Model, dataset: Dataset, ids, protocol: str, far_targets=DEFAULT_FAR_TARGETS
) -> EvalReport:
    gallery_items, probe_items = _protocol_items(dataset, ids, protocol)
    gallery = embed_items(model, dataset, gallery_items)
    probe = embed_items(model, dataset, probe_items)
    g_labels = np.array([i for i, _, _ in gallery_items])
    p_labels = np.array([i for i, _, _ in probe_items])
    scores, sim = score_matrix(gallery, g_labels, probe, p_labels)
    return evaluate_scores(scores, sim, g_labels, p_labels, far_targets)


def evaluate_folds(
    model: Model, dataset: Dataset, id_groups, protocol: str, far_targets=DEFAULT_FAR_TARGETS
):
    """One EvalReport per identity group plus their mean/std summary."""
    reports = [evaluate_protocol(model, dataset, group, protocol, far_targets) for group in id_groups]
    return reports, aggregate_folds(reports)


def protocol_eer(model: Model, dataset: Dataset, ids, protocol: str) -> float:
    gallery_items, probe_items = _protocol_items(dataset, ids, protocol)
    gallery = embed_items(model, dataset, gallery_items)
    probe = embed_items(model, dataset, probe_items)
    g_labels = np.array([i for i, _, _ in gallery_items])
    p_labels = np.array([i for i, _, _ in probe_items])
    scores, _ = score_matrix(gallery, g_labels, probe, p_labels)
    return eer(scores)


def retention_eval(pretrained: Model, adapted: Model, dataset: Dataset, eval_ids) -> tuple:
    """Source-source EER of both models on held-out identities, for the
    catastrophic-forgetting comparison."""
    return (
        protocol_eer(pretrained, dataset, eval_ids, "source"),
        protocol_eer(adapted, dataset, eval_ids, "source"),
    )
