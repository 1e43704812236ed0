"""Biometric verification and identification metrics.

Scores are cosine similarities (higher = more likely genuine). Conventions,
fixed here and mirrored by the brute-force oracles in the test suite:

- AUC: Mann-Whitney probability that a random genuine score outranks a
  random impostor score, ties counted 1/2.
- EER: sweep thresholds over the merged score multiset with
  FAR(t) = fraction of impostor scores >= t and FRR(t) = fraction of
  genuine scores < t; report (FAR+FRR)/2 at the threshold minimizing
  |FAR-FRR|, lowest threshold on ties.
- VR@FAR: with k = floor(far_target * n_impostor), the threshold is the
  (k+1)-th largest impostor score, acceptance is score > threshold, and
  the realized FAR is <= the target by construction.
- Rank-1: fraction of probes whose most-similar gallery entry shares their
  label, ties broken toward the lowest gallery index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_FAR_TARGETS = (5e-2, 1e-2, 1e-3, 1e-4)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()

    def require_both(self):
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ValueError("need at least one genuine and one impostor score")


def score_matrix(gallery: np.ndarray, gallery_labels, probe: np.ndarray, probe_labels):
    """Cosine similarity of every gallery/probe pair.

    Returns (ScoreSet, similarity matrix of shape (G, P)).
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    probe = np.asarray(probe, dtype=np.float64)
    g_labels = np.asarray(gallery_labels)
    p_labels = np.asarray(probe_labels)
    if gallery.shape[1] != probe.shape[1]:
        raise ValueError(f"embedding dims differ: {gallery.shape[1]} vs {probe.shape[1]}")
    g_norm = np.linalg.norm(gallery, axis=1)
    p_norm = np.linalg.norm(probe, axis=1)
    if np.min(g_norm) <= 1e-12 or np.min(p_norm) <= 1e-12:
        raise ValueError("zero-norm embedding in score_matrix")
    sim = (gallery / g_norm[:, None]) @ (probe / p_norm[:, None]).T
    same = g_labels[:, None] == p_labels[None, :]
    return ScoreSet(sim[same], sim[~same]), sim


def auc(scores: ScoreSet) -> float:
    """Probability a random genuine outranks a random impostor, ties at 1/2."""
    scores.require_both()
    imp = np.sort(scores.impostor)
    below = np.searchsorted(imp, scores.genuine, side="left")
    below_or_equal = np.searchsorted(imp, scores.genuine, side="right")
    wins = below.sum() + 0.5 * (below_or_equal - below).sum()
    return float(wins / (scores.genuine.size * scores.impostor.size))


def _far_frr_at(scores: ScoreSet, thresholds: np.ndarray):
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    far = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    frr = np.searchsorted(gen, thresholds, side="left") / gen.size
    return far, frr


def eer(scores: ScoreSet) -> float:
    scores.require_both()
    thresholds = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    far, frr = _far_frr_at(scores, thresholds)
    best = int(np.argmin(np.abs(far - frr)))  # argmin takes the lowest threshold on ties
    return float((far[best] + frr[best]) / 2.0)


def vr_at_far(scores: ScoreSet, far_target: float) -> float:
    scores.require_both()
    if not 0.0 < far_target < 1.0:
        raise ValueError(f"far_target must be in (0,1), got {far_target}")
    n_imp = scores.impostor.size
    if n_imp < 1.0 / far_target:
        warnings.warn(
            f"only {n_imp} impostor scores for FAR target {far_target}; "
            "the realized FAR saturates at 0",
            stacklevel=2,
        )
    k = int(np.floor(far_target * n_imp))
    threshold = np.sort(scores.impostor)[::-1][k]
    return float(np.mean(scores.genuine > threshold))


def realized_far(scores: ScoreSet, far_target: float) -> float:
    k = int(np.floor(far_target * scores.impostor.size))
    threshold = np.sort(scores.impostor)[::-1][k]
    return float(np.mean(scores.impostor > threshold))


def rank1(similarity: np.ndarray, gallery_labels, probe_labels) -> float:
    """Fraction of probes whose argmax-similarity gallery entry matches."""
    sim = np.asarray(similarity, dtype=np.float64)
    g_labels = np.asarray(gallery_labels)
    p_labels = np.asarray(probe_labels)
    missing = set(p_labels.tolist()) - set(g_labels.tolist())
    if missing:
        raise ValueError(f"probe identities missing from gallery: {sorted(missing)}")
    best = np.argmax(sim, axis=0)  # lowest gallery index wins ties
    return float(np.mean(g_labels[best] == p_labels))


def far_key(far_target: float) -> str:
    """Canonical JSON key for a FAR target: 5e-2, 1e-2, 1e-3, 1e-4."""
    mantissa, exponent = f"{far_target:.0e}".split("e")
    return f"{int(mantissa)}e{int(exponent)}"


@dataclass
class EvalReport:
    auc: float
    eer: float
    rank1: float
    vr_at_far: dict = field(default_factory=dict)  # far target -> rate

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "eer": self.eer,
            "rank1": self.rank1,
            "vr_at_far": {far_key(t): v for t, v in sorted(self.vr_at_far.items())},
        }


def evaluate_scores(scores: ScoreSet, similarity, gallery_labels, probe_labels, far_targets=DEFAULT_FAR_TARGETS) -> EvalReport:
    return EvalReport(
        auc=auc(scores),
        eer=eer(scores),
        rank1=rank1(similarity, gallery_labels, probe_labels),
        vr_at_far={t: vr_at_far(scores, t) for t in far_targets},
    )


@dataclass
class FoldSummary:
    n_folds: int
    mean: dict
    std: dict

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "mean": self.mean, "std": self.std}


def _mean_std(values) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def aggregate_folds(reports: list) -> FoldSummary:
    """Per-metric mean and sample standard deviation (ddof=1; 0 for n=1)."""
    if not reports:
        raise ValueError("no fold reports to aggregate")
    mean: dict = {}
    std: dict = {}
    for name in ("auc", "eer", "rank1"):
        m, s = _mean_std([getattr(r, name) for r in reports])
        mean[name] = m
        std[name] = s
    targets = sorted(reports[0].vr_at_far)
    mean["vr_at_far"] = {}
    std["vr_at_far"] = {}
    for t in targets:
        m, s = _mean_std([r.vr_at_far[t] for r in reports])
        mean["vr_at_far"][far_key(t)] = m
        std["vr_at_far"][far_key(t)] = s
    return FoldSummary(len(reports), mean, std)
