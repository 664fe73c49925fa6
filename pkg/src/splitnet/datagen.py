"""Toy datasets and per-member augmentation views.

Each member sees its own randomized view of every batch. The randomness of a
view is a pure function of ``(seed, member_index, epoch, batch_index)`` so
that sequential and concurrent training see the same augmentations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import InternalError, ValidationError

# spiral arms run from radius 0.2 to 3.0 over two full turns
SPIRAL_R0, SPIRAL_R1, SPIRAL_TURNS = 0.2, 3.0, 2.0
RAW_SCHEMA_VERSION = 1


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim not in (2, 4):
            raise ValidationError(f"features must be (N, F) or (N, C, H, W), got {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise ValidationError("features and labels disagree on N")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValidationError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, split or self.split)


def make_spirals(n_per_class: int, classes: int = 3, noise: float = 0.1, seed: int = 0,
                 split: str = "train") -> Dataset:
    """Interleaved 2-D spiral arms with isotropic Gaussian noise of std ``noise``."""
    if classes < 2:
        raise ValidationError("need at least two classes")
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for k in range(classes):
        t = rng.uniform(0.0, 1.0, n_per_class)
        r = SPIRAL_R0 + (SPIRAL_R1 - SPIRAL_R0) * t
        angle = 2 * np.pi * k / classes + SPIRAL_TURNS * 2 * np.pi * t
        pts = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
        feats.append(pts + noise * rng.standard_normal((n_per_class, 2)))
        labels.append(np.full(n_per_class, k))
    return Dataset(np.concatenate(feats), np.concatenate(labels), classes, split)


def make_blobs(n_per_class: int, classes: int = 3, noise: float = 0.5, seed: int = 0,
               dim: int = 2, split: str = "train") -> Dataset:
    """Gaussian blobs with centres spread on a radius-2 circle (first two dims)."""
    if classes < 2:
        raise ValidationError("need at least two classes")
    rng = np.random.default_rng(seed)
    centres = np.zeros((classes, dim))
    angles = 2 * np.pi * np.arange(classes) / classes
    centres[:, 0] = 2 * np.cos(angles)
    if dim > 1:
        centres[:, 1] = 2 * np.sin(angles)
    labels = np.repeat(np.arange(classes), n_per_class)
    feats = centres[labels] + noise * rng.standard_normal((len(labels), dim))
    return Dataset(feats, labels, classes, split)


def train_test_split(ds: Dataset, n_train: int, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Shuffle once and cut two disjoint slices."""
    if n_train + n_test > len(ds):
        raise ValidationError(f"need {n_train + n_test} samples, dataset has {len(ds)}")
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(order[:n_train], "train"), ds.subset(order[n_train:n_train + n_test], "test")


def make_split(kind: str, n_train: int, n_test: int, classes: int = 3, noise: float = 0.1,
               seed: int = 0) -> tuple[Dataset, Dataset]:
    makers = {"spirals": make_spirals, "blobs": make_blobs}
    if kind not in makers:
        raise ValidationError(f"unknown dataset kind {kind!r}; expected one of {sorted(makers)}")
    per_class = math.ceil((n_train + n_test) / classes)
    full = makers[kind](per_class, classes, noise, seed)
    return train_test_split(full, n_train, n_test, seed)


# ---------------------------------------------------------------------------
# serialization


def save_csv(ds: Dataset, path: str | Path) -> None:
    flat = ds.features.reshape(len(ds), -1)
    header = ",".join([f"f{i}" for i in range(flat.shape[1])] + ["label"])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row, label in zip(flat, ds.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def load_csv(path: str | Path, num_classes: int | None = None, split: str = "train") -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if not header or header[-1] != "label" or any(h != f"f{i}" for i, h in enumerate(header[:-1])):
        raise ValidationError(f"{path}: expected header f0..fk,label")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = table[:, -1].astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(table[:, :-1], labels, num_classes, split)


def save_raw(ds: Dataset, directory: str | Path, stem: str) -> None:
    """``<stem>.features.bin`` (<f8), ``<stem>.labels.bin`` (<i8) and a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stem}.features.bin").write_bytes(ds.features.astype("<f8").tobytes())
    (directory / f"{stem}.labels.bin").write_bytes(ds.labels.astype("<i8").tobytes())
    sidecar = {
        "schema_version": RAW_SCHEMA_VERSION,
        "shape": list(ds.features.shape),
        "features_dtype": "<f8",
        "labels_dtype": "<i8",
        "num_classes": ds.num_classes,
        "split": ds.split,
    }
    (directory / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_raw(directory: str | Path, stem: str) -> Dataset:
    directory = Path(directory)
    sidecar = json.loads((directory / f"{stem}.json").read_text())
    if sidecar.get("schema_version") != RAW_SCHEMA_VERSION:
        raise ValidationError(f"unsupported dataset schema {sidecar.get('schema_version')!r}")
    shape = tuple(sidecar["shape"])
    feats = np.frombuffer((directory / f"{stem}.features.bin").read_bytes(), dtype="<f8")
    labels = np.frombuffer((directory / f"{stem}.labels.bin").read_bytes(), dtype="<i8")
    if feats.size != int(np.prod(shape)) or labels.size != shape[0]:
        raise ValidationError(f"{directory}/{stem}: tensor sizes disagree with sidecar")
    return Dataset(feats.reshape(shape).copy(), labels.copy(), sidecar["num_classes"], sidecar["split"])


# ---------------------------------------------------------------------------
# views


@dataclass(frozen=True)
class HFlip:
    p: float = 0.5


@dataclass(frozen=True)
class PadCrop:
    pad: int = 4


@dataclass(frozen=True)
class RandomErasing:
    p: float = 0.5
    area: tuple[float, float] = (0.02, 0.4)
    ratio: tuple[float, float] = (0.3, 3.3)
    fill: Union[float, str] = 0.0  # a constant, or "random" for N(0, 1) noise


@dataclass(frozen=True)
class Jitter:
    sigma: float = 0.05


@dataclass(frozen=True)
class Mixup:
    alpha: float = 0.2


Transform = Union[HFlip, PadCrop, RandomErasing, Jitter, Mixup]
_TRANSFORMS = {"hflip": HFlip, "pad_crop": PadCrop, "random_erasing": RandomErasing,
               "jitter": Jitter, "mixup": Mixup}
_NAMES = {cls: name for name, cls in _TRANSFORMS.items()}


@dataclass(frozen=True)
class ViewBatch:
    features: np.ndarray
    y_a: np.ndarray
    y_b: np.ndarray
    lam: float = 1.0

    @property
    def mixed(self) -> bool:
        return self.lam != 1.0


@dataclass(frozen=True)
class ViewPipeline:
    member_index: int = 0
    seed: int = 0
    transforms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        for t in self.transforms:
            if isinstance(t, (HFlip, RandomErasing)) and not 0.0 <= t.p <= 1.0:
                raise ValidationError(f"{type(t).__name__}: probability must lie in [0, 1], got {t.p}")
            if isinstance(t, Mixup) and t.alpha < 0:
                raise ValidationError("mixup alpha must be >= 0")
            if isinstance(t, Jitter) and t.sigma < 0:
                raise ValidationError("jitter sigma must be >= 0")
            if isinstance(t, PadCrop) and t.pad < 0:
                raise ValidationError("pad must be >= 0")
        if sum(isinstance(t, Mixup) for t in self.transforms) > 1:
            raise ValidationError("at most one mixup transform per pipeline")

    def to_config(self) -> list[dict]:
        out = []
        for t in self.transforms:
            d = {"kind": _NAMES[type(t)], **t.__dict__}
            out.append({k: list(v) if isinstance(v, tuple) else v for k, v in d.items()})
        return out

    @classmethod
    def from_config(cls, config: Sequence[dict], member_index: int = 0, seed: int = 0) -> "ViewPipeline":
        transforms = []
        for entry in config:
            entry = dict(entry)
            kind = entry.pop("kind", None)
            if kind not in _TRANSFORMS:
                raise ValidationError(f"unknown transform {kind!r}; expected one of {sorted(_TRANSFORMS)}")
            for key in ("area", "ratio"):
                if key in entry:
                    entry[key] = tuple(entry[key])
            try:
                transforms.append(_TRANSFORMS[kind](**entry))
            except TypeError as exc:
                raise ValidationError(f"transform {kind}: {exc}") from None
        return cls(member_index, seed, tuple(transforms))


def default_transforms(image: bool) -> tuple:
    if image:
        return (HFlip(0.5), PadCrop(4), RandomErasing(0.5), Mixup(0.2))
    return (Jitter(0.05),)


def _erase(x, t: RandomErasing, rng):
    n = len(x)
    # every sample draws the same amount of randomness whether or not it is erased
    hit = rng.random(n) < t.p
    area = rng.uniform(t.area[0], t.area[1], n)
    log_ratio = rng.uniform(math.log(t.ratio[0]), math.log(t.ratio[1]), n)
    u_top, u_left = rng.random(n), rng.random(n)
    noise_fill = t.fill == "random"
    if x.ndim == 4:
        _, c, h, w = x.shape
        for i in np.flatnonzero(hit):
            target = area[i] * h * w
            r = math.exp(log_ratio[i])
            eh = min(max(int(round(math.sqrt(target * r))), 1), h)
            ew = min(max(int(round(math.sqrt(target / r))), 1), w)
            top = int(u_top[i] * (h - eh + 1))
            left = int(u_left[i] * (w - ew + 1))
            patch = rng.standard_normal((c, eh, ew)) if noise_fill else float(t.fill)
            x[i, :, top:top + eh, left:left + ew] = patch
    else:
        f = x.shape[1]
        for i in np.flatnonzero(hit):
            span = min(max(int(round(area[i] * f)), 1), f)
            start = int(u_top[i] * (f - span + 1))
            x[i, start:start + span] = rng.standard_normal(span) if noise_fill else float(t.fill)
    return x


def _pad_crop(x, pad, rng):
    if x.ndim != 4:
        raise ValidationError("pad-and-crop needs image batches (N, C, H, W)")
    n, _, h, w = x.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    if pad == 0:
        return x
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = xp[i, :, dy:dy + h, dx:dx + w]
    return out


def apply_view(pipeline: ViewPipeline, features, labels, epoch: int, batch_index: int) -> ViewBatch:
    """Apply the pipeline's transforms in order; randomness keyed by (seed, member, epoch, batch)."""
    x = np.array(features, dtype=np.float64, copy=True)
    y = np.asarray(labels)
    shape = x.shape
    rng = np.random.default_rng([pipeline.seed, pipeline.member_index, epoch, batch_index])
    y_b, lam = y, 1.0
    for t in pipeline.transforms:
        if isinstance(t, HFlip):
            if x.ndim != 4:
                raise ValidationError("horizontal flip needs image batches (N, C, H, W)")
            flip = rng.random(len(x)) < t.p
            x[flip] = x[flip][..., ::-1]
        elif isinstance(t, PadCrop):
            x = _pad_crop(x, t.pad, rng)
        elif isinstance(t, Jitter):
            x = x + t.sigma * rng.standard_normal(x.shape)
        elif isinstance(t, RandomErasing):
            x = _erase(x, t, rng)
        elif isinstance(t, Mixup):
            if t.alpha > 0:
                lam = float(rng.beta(t.alpha, t.alpha))
                perm = rng.permutation(len(x))
                x = lam * x + (1.0 - lam) * x[perm]
                y_b = y[perm]
        else:
            raise ValidationError(f"unknown transform {t!r}")
        if x.shape != shape:
            raise InternalError(f"{type(t).__name__} changed batch shape {shape} -> {x.shape}")
    return ViewBatch(x, y, y_b, lam)
