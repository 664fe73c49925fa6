"""Sequential versus concurrent inference of the S members on one host."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .ensemble import EnsembleRule, combine
from .errors import ValidationError
from .numerics import MemberModel

MODES = ("sequential", "concurrent")
WARMUP = 3
MIN_REPS = 10


@dataclass
class LatencyReport:
    mode: str
    batch: int
    reps: int
    workers: int
    times_ms: list[float]  # timed repetitions only, warm-ups dropped
    median_ms: float
    p95_ms: float
    speedup: float = 1.0
    scores: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("scores")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _mode(mode: str) -> str:
    mode = {"seq": "sequential", "par": "concurrent"}.get(mode, mode)
    if mode not in MODES:
        raise ValidationError(f"unknown bench mode {mode!r}")
    return mode


def bench(models: Sequence[MemberModel], x: np.ndarray, mode: str = "sequential", workers: int = 1,
          reps: int = MIN_REPS, rule: EnsembleRule | None = None,
          reference: LatencyReport | None = None) -> LatencyReport:
    """Time ``reps`` ensemble predictions of ``models`` on the batch ``x``.

    Each member gets one BLAS thread so that lanes, not the math library,
    provide the parallelism. ``reference`` is a sequential report; when given,
    ``speedup`` is its median divided by this run's median.
    """
    mode = _mode(mode)
    if workers < 1:
        raise ValidationError(f"workers must be >= 1, got {workers}")
    if reps < MIN_REPS:
        raise ValidationError(f"reps must be >= {MIN_REPS}, got {reps}")
    if not models:
        raise ValidationError("bench needs at least one model")
    rule = rule or EnsembleRule()
    x = np.ascontiguousarray(x)
    times: list[float] = []
    scores = None
    with threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=workers) as pool:
        for rep in range(WARMUP + reps):
            t0 = time.perf_counter()
            if mode == "sequential":
                outs = [m.predict(x) for m in models]
            else:
                outs = list(pool.map(lambda m: m.predict(x), models))
            out = combine(rule, outs)
            elapsed = (time.perf_counter() - t0) * 1e3
            if rep >= WARMUP:
                times.append(elapsed)
            scores = out
    arr = np.asarray(times)
    report = LatencyReport(mode, int(x.shape[0]), reps, workers, times, float(np.median(arr)),
                           float(np.percentile(arr, 95)), scores=scores)
    if reference is not None:
        report.speedup = reference.median_ms / report.median_ms
    return report


def compare(models: Sequence[MemberModel], x: np.ndarray, workers: int = 2,
            reps: int = MIN_REPS, rule: EnsembleRule | None = None) -> tuple[LatencyReport, LatencyReport]:
    """Run the sequential baseline then the concurrent mode against it."""
    seq = bench(models, x, "sequential", 1, reps, rule)
    par = bench(models, x, "concurrent", workers, reps, rule, reference=seq)
    return seq, par


def hardware_lanes() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1
