"""Combining member predictions and measuring how spread out members are."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

COMBINES = ("average", "max-confidence")


@dataclass(frozen=True)
class EnsembleRule:
    combine: str = "average"
    apply_softmax_first: bool = False

    def __post_init__(self):
        alias = {"avg": "average", "max": "max-confidence"}
        object.__setattr__(self, "combine", alias.get(self.combine, self.combine))
        if self.combine not in COMBINES:
            raise ValidationError(f"unknown ensemble combine {self.combine!r}")


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def combine(rule: EnsembleRule, score_sets: Sequence[np.ndarray]) -> np.ndarray:
    """Fuse S equal-shaped (batch, C) score arrays into one.

    ``average`` is the elementwise mean. ``max-confidence`` gives each sample the
    full row of the member with the largest top score; ties go to the lowest
    member index. Members are always folded in index order, so the result is
    bitwise reproducible.
    """
    if len(score_sets) == 0:
        raise ValidationError("combine needs at least one member")
    scores = [np.asarray(s) for s in score_sets]
    shape = scores[0].shape
    if len(shape) != 2 or any(s.shape != shape for s in scores):
        raise ValidationError(f"member scores must share one (batch, C) shape, got {[s.shape for s in scores]}")
    if rule.apply_softmax_first:
        scores = [_softmax(s) for s in scores]
    if len(scores) == 1:
        return scores[0].copy()
    if rule.combine == "average":
        total = scores[0].copy()
        for s in scores[1:]:
            total += s
        return total / len(scores)
    stacked = np.stack(scores)  # (S, batch, C)
    best = stacked.max(axis=2).argmax(axis=0)  # argmax picks the first maximum
    return stacked[best, np.arange(shape[0])]


def predict(rule: EnsembleRule, score_sets) -> np.ndarray:
    return combine(rule, score_sets).argmax(axis=1)


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(scores).argmax(axis=1) == labels))


@dataclass(frozen=True)
class Spread:
    coords: np.ndarray  # (S, 2)
    std: float


def weight_spread(weights: Sequence[np.ndarray]) -> Spread:
    """Project S flattened weight vectors onto their top two principal directions.

    Works on the S x S Gram matrix of the centred vectors, so the cost is
    independent of the vector length. The returned ``std`` is the standard
    deviation of all 2S coordinates.
    """
    vecs = [np.ravel(np.asarray(w, dtype=np.float64)) for w in weights]
    if len(vecs) < 2:
        raise ValidationError("weight_spread needs at least two members")
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ValidationError("weight vectors must have equal length")
    x = np.stack(vecs)
    if np.all(x == x[0]):
        return Spread(np.zeros((len(vecs), 2)), 0.0)
    x = x - x.mean(axis=0)
    gram = x @ x.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1][:2]
    coords = np.zeros((len(vecs), 2))
    for j, k in enumerate(order):
        lam = max(evals[k], 0.0)
        u = evecs[:, k]
        # deterministic sign: largest-magnitude entry positive
        if u[np.argmax(np.abs(u))] < 0:
            u = -u
        coords[:, j] = u * np.sqrt(lam)
    return Spread(coords, float(coords.std()))
