"""Small numpy networks with hand-written backpropagation.

Members are built from ``generic`` ArchSpecs: fully-connected layers become
affine maps, 3x3 convs become padded convolutions, a global-pool averages
the spatial dims, and a ReLU follows every affine/conv layer except the
classifier head. Arrays are float64 unless a model is built with
``dtype=np.float32``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .archspec import ArchSpec
from .errors import StateError, ValidationError

CKPT_MAGIC = b"SPLT"
CKPT_VERSION = 1


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self._cache = None

    @property
    def fan_in(self) -> int:
        return 1

    def forward(self, x, cache=True):
        raise NotImplementedError

    def backward(self, dy, grads: dict[str, np.ndarray]):
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a preceding forward")
        cached, self._cache = self._cache, None
        return cached


class Affine(Layer):
    kind = "affine"

    def __init__(self, n_in, n_out, dtype=np.float64):
        super().__init__()
        self.params = {"weight": np.zeros((n_in, n_out), dtype),
                       "bias": np.zeros(n_out, dtype)}

    @property
    def fan_in(self):
        return self.params["weight"].shape[0]

    def forward(self, x, cache=True):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ValidationError(f"affine layer expects (batch, {w.shape[0]}) input, got {x.shape}")
        if cache:
            self._cache = x
        return x @ w + self.params["bias"]

    def backward(self, dy, grads):
        x = self._pop_cache()
        grads["weight"] = x.T @ dy
        grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"].T


class Conv3x3(Layer):
    """3x3 convolution, zero padding 1, NCHW layout."""

    kind = "conv3x3"

    def __init__(self, c_in, c_out, stride=1, dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.params = {"weight": np.zeros((c_out, c_in, 3, 3), dtype),
                       "bias": np.zeros(c_out, dtype)}

    @property
    def fan_in(self):
        return self.params["weight"].shape[1] * 9

    def _windows(self, x):
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        s = self.stride
        return sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x, cache=True):
        c_in = self.params["weight"].shape[1]
        if x.ndim != 4 or x.shape[1] != c_in:
            raise ValidationError(f"conv layer expects (batch, {c_in}, H, W) input, got {x.shape}")
        win = self._windows(x)
        out = np.tensordot(win, self.params["weight"], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]
        if cache:
            self._cache = (x.shape, win)
        return np.ascontiguousarray(out)

    def backward(self, dy, grads):
        shape, win = self._pop_cache()
        w = self.params["weight"]
        s = self.stride
        grads["weight"] = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
        grads["bias"] = dy.sum(axis=(0, 2, 3))
        n, c, h, wd = shape
        ho, wo = dy.shape[2:]
        dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dy.dtype)
        for ki in range(3):
            for kj in range(3):
                contrib = np.tensordot(dy, w[:, :, ki, kj], axes=([1], [0]))  # (n, ho, wo, c)
                dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += contrib.transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, cache=True):
        if cache:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, dy, grads):
        return dy * self._pop_cache()


class GlobalAvgPool(Layer):
    kind = "global-average"

    def forward(self, x, cache=True):
        if x.ndim != 4:
            raise ValidationError(f"global pool expects NCHW input, got {x.shape}")
        if cache:
            self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy, grads):
        n, c, h, w = self._pop_cache()
        return np.broadcast_to(dy[:, :, None, None] / (h * w), (n, c, h, w)).copy()


def build_layers(spec: ArchSpec, dtype=np.float64) -> list[Layer]:
    if spec.family != "generic":
        raise ValidationError(
            f"trainable members are built from 'generic' specs, got family {spec.family!r}")
    specs = spec.explicit_layers
    last = len(specs) - 1
    layers: list[Layer] = []
    for i, ls in enumerate(specs):
        if ls.kind == "fully-connected":
            layers.append(Affine(ls.in_channels, ls.out_channels, dtype))
        elif ls.kind == "conv" and ls.kernel == 3 and ls.groups == 1:
            layers.append(Conv3x3(ls.in_channels, ls.out_channels, ls.stride, dtype))
        elif ls.kind == "global-pool":
            layers.append(GlobalAvgPool())
            continue
        else:
            raise ValidationError(
                f"layer {i}: only fully-connected, 3x3 conv and global-pool layers are trainable")
        if i != last:
            layers.append(ReLU())
    if not isinstance(layers[-1], Affine):
        raise ValidationError("the last layer of a member must be a fully-connected classifier")
    return layers


class MemberModel:
    """One small network: layer graph, parameters, gradients and momentum."""

    def __init__(self, layers: list[Layer], member_index: int = 0, rng_seed: int | None = None,
                 spec: ArchSpec | None = None):
        self.layers = layers
        self.member_index = member_index
        self.rng_seed = rng_seed
        self.spec = spec
        self.grads = {name: np.zeros_like(p) for name, p in self.named_params()}
        self.momentum = {name: np.zeros_like(p) for name, p in self.named_params()}

    @classmethod
    def from_spec(cls, spec: ArchSpec, member_index: int = 0, seed: int | None = None,
                  dtype=np.float64) -> "MemberModel":
        model = cls(build_layers(spec, dtype), member_index, seed, spec)
        if seed is not None:
            model.init_params(seed)
        return model

    def named_params(self):
        """(name, array) pairs in declaration order."""
        for i, layer in enumerate(self.layers):
            for key, arr in layer.params.items():
                yield f"layer{i}.{key}", arr

    @property
    def num_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def decay_mask(self) -> dict[str, bool]:
        return {name: name.endswith(".weight") for name, _ in self.named_params()}

    def init_params(self, seed: int) -> "MemberModel":
        """Kaiming-normal weights, std sqrt(2 / fan_in); zero biases."""
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if "weight" in layer.params:
                w = layer.params["weight"]
                w[...] = rng.normal(0.0, np.sqrt(2.0 / layer.fan_in), size=w.shape)
                layer.params["bias"][...] = 0
        for buf in self.momentum.values():
            buf[...] = 0
        self.rng_seed = seed
        return self

    def forward(self, x):
        """Logits for a batch; caches activations for :meth:`backward`."""
        x = np.asarray(x)
        for layer in self.layers:
            x = layer.forward(x, cache=True)
        return x

    def predict(self, x):
        """Like :meth:`forward` but touches no state, so it is safe to share across threads."""
        x = np.asarray(x)
        for layer in self.layers:
            x = layer.forward(x, cache=False)
        return x

    def backward(self, upstream):
        dy = upstream
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            local: dict[str, np.ndarray] = {}
            dy = layer.backward(dy, local)
            for key, g in local.items():
                self.grads[f"layer{i}.{key}"][...] = g
        return dy

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def param(self, name: str) -> np.ndarray:
        return dict(self.named_params())[name]


def sgd_step(model: MemberModel, lr: float, momentum: float = 0.9, wd: float = 0.0,
             decay_mask: dict[str, bool] | None = None) -> None:
    """Nesterov SGD: g += wd*theta (masked); v = mu*v + g; theta -= lr*(g + mu*v)."""
    if decay_mask is None:
        decay_mask = model.decay_mask()
    for name, theta in model.named_params():
        g = model.grads[name]
        if wd and decay_mask.get(name, False):
            g = g + wd * theta
        v = model.momentum[name]
        v *= momentum
        v += g
        theta -= lr * (g + momentum * v)


# ---------------------------------------------------------------------------
# checkpoints


def spec_hash(spec: ArchSpec) -> str:
    return hashlib.sha256(spec.to_json().encode()).hexdigest()


def save_checkpoint(path: str | Path, model: MemberModel, epoch: int = 0, extra: dict | None = None):
    """Write ``SPLT``, u32 version, u32 metadata length, JSON metadata, then float32 tensors."""
    if model.spec is None:
        raise ValidationError("cannot checkpoint a model without its ArchSpec")
    meta = {
        "spec_hash": spec_hash(model.spec),
        "member_index": model.member_index,
        "epoch": epoch,
        "seed": model.rng_seed,
        "spec": model.spec.to_dict(),
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in model.named_params()],
    }
    if extra:
        meta.update(extra)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, p in model.named_params():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, dtype=np.float64) -> tuple[MemberModel, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValidationError(f"{path}: not a splitnet checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    offset = 12 + meta_len
    meta = json.loads(data[12:offset].decode("utf-8"))
    spec = ArchSpec.from_dict(meta["spec"])
    if spec_hash(spec) != meta["spec_hash"]:
        raise ValidationError(f"{path}: spec hash mismatch")
    model = MemberModel(build_layers(spec, dtype), meta["member_index"], meta["seed"], spec)
    for _, p in model.named_params():
        nbytes = p.size * 4
        chunk = np.frombuffer(data, dtype="<f4", count=p.size, offset=offset)
        p[...] = chunk.reshape(p.shape)
        offset += nbytes
    if offset != len(data):
        raise ValidationError(f"{path}: trailing bytes after tensors")
    return model, meta
