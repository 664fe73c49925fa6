"""Losses, schedules and the divide-and-co-train loop."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .archspec import ArchSpec
from .datagen import Dataset, ViewBatch, ViewPipeline, apply_view, default_transforms
from .ensemble import EnsembleRule, accuracy, combine
from .errors import DivergenceError, ValidationError
from .numerics import MemberModel, save_checkpoint, sgd_step

LOG_EPS = 1e-12
METRICS_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# probabilities and losses


def _check_finite(z):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits contain NaN or infinite values")
    return z


def log_softmax(logits) -> np.ndarray:
    z = _check_finite(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with the row max subtracted first."""
    z = _check_finite(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_probs(p, atol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValidationError(f"probabilities must be (batch, C), got shape {p.shape}")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=atol):
        raise ValidationError("probability rows must be nonnegative and sum to 1")
    return p


def _targets(y_a, y_b, lam, num_classes):
    y_a = np.asarray(y_a)
    if y_a.ndim != 1 or (len(y_a) and (y_a.min() < 0 or y_a.max() >= num_classes)):
        raise ValidationError(f"labels must be a 1-D array of integers in [0, {num_classes})")
    t = np.zeros((len(y_a), num_classes))
    t[np.arange(len(y_a)), y_a] = lam
    if lam != 1.0:
        y_b = np.asarray(y_b)
        if y_b.min() < 0 or y_b.max() >= num_classes:
            raise ValidationError("mixup partner labels out of range")
        t[np.arange(len(y_b)), y_b] += 1.0 - lam
    return t


def cross_entropy(p, y, mix: tuple | None = None) -> float:
    """Mean cross entropy of probability rows ``p`` against integer labels.

    ``mix=(y_a, y_b, lam)`` gives the mixup form ``lam*CE(p, y_a) + (1-lam)*CE(p, y_b)``.
    """
    p = check_probs(p)
    y_a, y_b, lam = mix if mix is not None else (y, y, 1.0)
    t = _targets(y_a, y_b, lam, p.shape[1])
    return float(-(t * np.log(np.maximum(p, LOG_EPS))).sum() / len(p))


def entropy(p) -> np.ndarray:
    """Per-row Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    return -(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=-1)


def cot_loss(prob_sets: Sequence[np.ndarray]) -> float:
    """Jensen-Shannon divergence H(mean p_i) - mean H(p_i), averaged over the batch.

    Clipped to [0, ln S] to absorb rounding.
    """
    if len(prob_sets) < 2:
        raise ValidationError("co-training loss needs at least two members")
    probs = [check_probs(p) for p in prob_sets]
    if any(p.shape != probs[0].shape for p in probs):
        raise ValidationError("member probability batches must share one shape")
    s = len(probs)
    mean_p = sum(probs) / s
    value = float(np.mean(entropy(mean_p) - sum(entropy(p) for p in probs) / s))
    return min(max(value, 0.0), math.log(s))


@dataclass
class LossTerms:
    total: float
    ce: list[float]
    cot: float
    grad_logits: list[np.ndarray] = field(repr=False)


def total_loss(logit_sets: Sequence[np.ndarray], y, lam_cot: float,
               mixes: Sequence[tuple] | None = None) -> LossTerms:
    """Sum of member cross entropies plus ``lam_cot`` times the co-training loss.

    Also returns d(total)/d(logits) for every member. With one member the
    co-training term is skipped entirely.
    """
    s = len(logit_sets)
    if s == 0:
        raise ValidationError("total_loss needs at least one member")
    shape = np.shape(logit_sets[0])
    if any(np.shape(z) != shape for z in logit_sets):
        raise ValidationError("member logits must share one shape")
    n, c = shape
    log_p = [log_softmax(z) for z in logit_sets]
    probs = [np.exp(lp) for lp in log_p]
    if mixes is None:
        mixes = [(y, y, 1.0)] * s

    ce, grads = [], []
    for p, lp, (y_a, y_b, lam) in zip(probs, log_p, mixes):
        t = _targets(y_a, y_b, lam, c)
        ce.append(float(-(t * np.maximum(lp, math.log(LOG_EPS))).sum() / n))
        grads.append((p - t) / n)

    cot = 0.0
    if s > 1:
        mean_p = sum(probs) / s
        log_m = np.log(np.maximum(mean_p, np.finfo(np.float64).tiny))
        h_mean = -(mean_p * log_m).sum(axis=1)
        h_each = [-(p * lp).sum(axis=1) for p, lp in zip(probs, log_p)]
        cot = float(np.mean(h_mean - sum(h_each) / s))
        if lam_cot:
            for i, (p, lp) in enumerate(zip(probs, log_p)):
                # dL/dp_i = (log p_i - log m) / (S N); then back through softmax
                g = (lp - log_m) / (s * n)
                grads[i] = grads[i] + lam_cot * p * (g - (p * g).sum(axis=1, keepdims=True))
    total = sum(ce) + lam_cot * cot
    return LossTerms(total, ce, cot, grads)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class TrainConfig:
    S: int = 2
    max_epoch: int = 200
    slow_epoch: int = 5
    lr: float = 0.1
    momentum: float = 0.9
    wd: float = 1e-4
    lambda_cot: float = 0.5
    cot_warm_epochs: int = 40
    batch_size: int = 128
    base_seed: int = 0
    precision: str = "float64"
    workers: int = 1
    transforms: tuple | None = None  # view config list; None picks the default for the data shape
    ensemble: str = "average"
    ensemble_softmax: bool = False

    def __post_init__(self):
        if self.S < 1:
            raise ValidationError("S must be >= 1")
        if not 0 <= self.slow_epoch < self.max_epoch:
            raise ValidationError("need 0 <= slow_epoch < max_epoch")
        if not 0 <= self.cot_warm_epochs <= self.max_epoch:
            raise ValidationError("need 0 <= cot_warm_epochs <= max_epoch")
        if self.lambda_cot < 0:
            raise ValidationError("lambda_cot must be >= 0")
        if self.batch_size < 1 or self.workers < 1:
            raise ValidationError("batch_size and workers must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ValidationError("precision must be 'float64' or 'float32'")
        if self.transforms is not None:
            object.__setattr__(self, "transforms", tuple(dict(t) for t in self.transforms))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown TrainConfig keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        if self.transforms is not None:
            out["transforms"] = [dict(t) for t in self.transforms]
        return out


def lambda_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up of the co-training weight from 0, then flat at ``lambda_cot``."""
    if cfg.cot_warm_epochs == 0:
        return cfg.lambda_cot
    return cfg.lambda_cot * min(epoch / cfg.cot_warm_epochs, 1.0)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up over ``slow_epoch`` epochs, then cosine decay to 0 at ``max_epoch``."""
    if epoch < cfg.slow_epoch:
        return cfg.lr * epoch / cfg.slow_epoch
    progress = (epoch - cfg.slow_epoch) / (cfg.max_epoch - cfg.slow_epoch)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    lam: float
    ce: tuple[float, ...]
    cot: float
    acc: tuple[float, ...]
    acc_ensemble: float


@dataclass
class TrainRecord:
    S: int
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]

    def header(self) -> list[str]:
        return (["epoch", "lr", "lambda"] + [f"ce_member_{i}" for i in range(self.S)] + ["cot"]
                + [f"acc_member_{i}" for i in range(self.S)] + ["acc_ensemble"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        for e in self.epochs:
            writer.writerow([e.epoch, repr(e.lr), repr(e.lam), *map(repr, e.ce), repr(e.cot),
                             *map(repr, e.acc), repr(e.acc_ensemble)])
        return buf.getvalue()


@dataclass
class TrainResult:
    record: TrainRecord
    models: list[MemberModel]


def _batches(n, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _evaluate(models, test: Dataset, rule: EnsembleRule, dtype):
    x = test.features.astype(dtype, copy=False)
    scores = [m.predict(x).astype(np.float64) for m in models]
    accs = tuple(accuracy(s, test.labels) for s in scores)
    return accs, accuracy(combine(rule, scores), test.labels)


def train(cfg: TrainConfig, spec: ArchSpec, train_set: Dataset, test_set: Dataset,
          out_dir: str | Path | None = None) -> TrainResult:
    """Co-train ``cfg.S`` members of ``spec`` and evaluate them every epoch.

    Member ``i`` is initialized with seed ``base_seed + i`` and sees its own
    augmented view of each shared batch. Forward/backward passes may fan out
    over ``cfg.workers`` threads; the loss is reduced and the parameters are
    updated in member-index order, so the record does not depend on ``workers``.
    """
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    S = cfg.S
    models = [MemberModel.from_spec(spec, i, cfg.base_seed + i, dtype) for i in range(S)]
    image = train_set.features.ndim == 4
    if cfg.transforms is None:
        transforms = default_transforms(image)
        pipelines = [ViewPipeline(i, cfg.base_seed, transforms) for i in range(S)]
    else:
        pipelines = [ViewPipeline.from_config(cfg.transforms, i, cfg.base_seed) for i in range(S)]
    rule = EnsembleRule(cfg.ensemble, cfg.ensemble_softmax)
    record = TrainRecord(S)
    pool = ThreadPoolExecutor(max_workers=min(cfg.workers, S)) if cfg.workers > 1 and S > 1 else None

    def fan(fn, *iterables):
        if pool is None:
            return list(map(fn, *iterables))
        return list(pool.map(fn, *iterables))

    x_all, y_all = train_set.features, train_set.labels
    try:
        for epoch in range(cfg.max_epoch):
            lr = lr_schedule(epoch, cfg)
            lam = lambda_schedule(epoch, cfg) if S > 1 else 0.0
            ce_sum = np.zeros(S)
            cot_sum = 0.0
            batches = _batches(len(train_set), cfg.batch_size, cfg.base_seed, epoch)
            for b, idx in enumerate(batches):
                views: list[ViewBatch] = [apply_view(p, x_all[idx], y_all[idx], epoch, b)
                                          for p in pipelines]
                logits = fan(lambda m, v: m.forward(v.features.astype(dtype, copy=False)),
                             models, views)
                if not all(np.all(np.isfinite(z)) for z in logits):
                    raise DivergenceError(
                        f"non-finite logits at epoch {epoch}, batch {b} (lr={lr:.4g}, lambda={lam:.4g})")
                terms = total_loss([z.astype(np.float64, copy=False) for z in logits], y_all[idx],
                                   lam, [(v.y_a, v.y_b, v.lam) for v in views])
                if not math.isfinite(terms.total):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch {b} (lr={lr:.4g}, lambda={lam:.4g})")
                fan(lambda m, g: m.backward(g.astype(dtype, copy=False)), models, terms.grad_logits)
                for m in models:
                    sgd_step(m, lr, cfg.momentum, cfg.wd)
                ce_sum += terms.ce
                cot_sum += terms.cot
            accs, acc_ens = _evaluate(models, test_set, rule, dtype)
            nb = len(batches)
            record.epochs.append(EpochRecord(
                epoch, lr, lam, tuple(float(c / nb) for c in ce_sum), cot_sum / nb, accs, acc_ens))
    finally:
        if pool is not None:
            pool.shutdown()

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(record.to_csv())
        for m in models:
            path = out / f"member_{m.member_index}.splt"
            save_checkpoint(path, m, epoch=cfg.max_epoch,
                            extra={"ensemble": cfg.ensemble, "S": S})
            record.checkpoints.append(str(path))
    return TrainResult(record, models)
