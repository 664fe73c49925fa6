"""Declarative architecture specs and the parameter/FLOP cost model.

Two FLOP conventions are supported:

* ``eq3``: one multiply and one add are two operations, and summing ``n``
  products takes ``n - 1`` additions, so a conv layer costs
  ``(2 * K^2 * C_in / d - 1) * H * W * C_out``.
* ``mac``: one multiply-accumulate is one FLOP, ``K^2 * C_in / d * H * W * C_out``.
  Published CIFAR cost tables use this convention.

Biases and batch-norm affine parameters are never counted.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import UnsupportedFamilyError, ValidationError

SCHEMA_VERSION = 1

LAYER_KINDS = ("conv", "depthwise-conv", "fully-connected", "avg-pool", "global-pool")
FAMILIES = (
    "resnet-cifar-bottleneck",
    "se-resnet-cifar",
    "wrn",
    "resnext",
    "shake-shake",
    "densenet",
    "pyramidnet-shakedrop",
    "efficientnet",
    "generic",
)
CONVENTIONS = ("eq3", "mac")

# Output channels of the stem conv and the seven stages plus the head conv.
EFFICIENTNET_B0_CHANNELS = (32, 16, 24, 40, 80, 112, 192, 320, 1280)

_DEFAULT_BASE = {
    "resnet-cifar-bottleneck": (16, 32, 64),
    "se-resnet-cifar": (16, 32, 64),
    "wrn": (16, 32, 64),
    "resnext": (64,),
    "shake-shake": (16,),
    "pyramidnet-shakedrop": (16,),
    "efficientnet": EFFICIENTNET_B0_CHANNELS,
}

# Scale fields that mean something for each family; everything else is ignored.
RELEVANT_FIELDS = {
    "resnet-cifar-bottleneck": ("base_channels",),
    "se-resnet-cifar": ("base_channels",),
    "wrn": ("base_channels", "widen_factor"),
    "resnext": ("base_channels", "cardinality"),
    "shake-shake": ("base_channels", "widen_factor"),
    "densenet": ("growth_rate",),
    "pyramidnet-shakedrop": ("base_channels", "additional_rate"),
    "efficientnet": ("base_channels",),
    "generic": ("explicit_layers",),
}

_IMAGE_CHANNELS = 3
_RESNEXT_STEM = 64
_RESNEXT_STAGE_OUT = (256, 512, 1024)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 1
    groups: int = 1
    stride: int = 1
    out_height: int = 1
    out_width: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        for name in ("in_channels", "out_channels", "kernel", "groups", "stride",
                     "out_height", "out_width"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        d = self.groups
        if self.in_channels % d or self.out_channels % d:
            raise ValidationError(
                f"C_in mod d = 0 and C_out mod d = 0 violated "
                f"(C_in={self.in_channels}, C_out={self.out_channels}, d={d})")
        if self.kind == "depthwise-conv" and d != self.in_channels:
            raise ValidationError(f"depthwise-conv requires d = C_in (d={d}, C_in={self.in_channels})")
        if self.kind == "fully-connected" and (
                self.kernel != 1 or self.out_height != 1 or self.out_width != 1 or d != 1):
            raise ValidationError("fully-connected requires K = 1, H = W = 1, d = 1")
        if self.kind in ("avg-pool", "global-pool") and self.in_channels != self.out_channels:
            raise ValidationError("pool layers must keep the channel count")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown LayerSpec fields: {sorted(extra)}")
        return cls(**d)


def _positive(name, value):
    if value is None or value <= 0:
        raise ValidationError(f"{name} must be positive, got {value!r}")


@dataclass(frozen=True)
class ArchSpec:
    """A network family plus the scale parameters that division acts on."""

    name: str
    family: str
    depth: int
    base_channels: tuple[int, ...] | None = None
    widen_factor: float = 1.0
    cardinality: int = 1
    growth_rate: float | None = None
    additional_rate: float | None = None
    drop_ratio: float = 0.0
    input_resolution: int = 32
    num_classes: int = 100
    explicit_layers: tuple[LayerSpec, ...] | None = None

    def __post_init__(self):
        fam = self.family
        if fam not in FAMILIES:
            raise ValidationError(f"unknown family {fam!r}; expected one of {FAMILIES}")
        if not isinstance(self.depth, int) or self.depth < 1:
            raise ValidationError(f"depth must be a positive integer, got {self.depth!r}")
        if fam in ("resnet-cifar-bottleneck", "resnext") and (self.depth - 2) % 9:
            raise ValidationError(f"{fam} requires depth = 9n+2, got {self.depth}")
        if fam == "wrn" and ((self.depth - 4) % 6 or self.depth < 10):
            raise ValidationError(f"wrn requires depth = 6n+4, got {self.depth}")
        if not 0.0 <= self.drop_ratio <= 1.0:
            raise ValidationError(f"drop_ratio must lie in [0, 1], got {self.drop_ratio}")
        _positive("input_resolution", self.input_resolution)
        _positive("num_classes", self.num_classes)

        if self.base_channels is None and fam in _DEFAULT_BASE:
            object.__setattr__(self, "base_channels", _DEFAULT_BASE[fam])
        if self.base_channels is not None:
            chans = tuple(int(c) for c in self.base_channels)
            if not chans or any(c < 1 for c in chans):
                raise ValidationError("base_channels must be a non-empty list of positive integers")
            object.__setattr__(self, "base_channels", chans)
        _positive("widen_factor", self.widen_factor)
        _positive("cardinality", self.cardinality)
        if fam == "densenet":
            _positive("growth_rate", self.growth_rate)
        if fam == "pyramidnet-shakedrop":
            _positive("additional_rate", self.additional_rate)

        if fam == "generic":
            if not self.explicit_layers:
                raise ValidationError("family 'generic' requires explicit_layers")
            layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l)
                           for l in self.explicit_layers)
            object.__setattr__(self, "explicit_layers", layers)
        elif self.explicit_layers is not None:
            raise ValidationError("explicit_layers is only allowed for family 'generic'")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "family": self.family,
            "depth": self.depth,
            "drop_ratio": self.drop_ratio,
            "input_resolution": self.input_resolution,
            "num_classes": self.num_classes,
        }
        for key in RELEVANT_FIELDS[self.family]:
            value = getattr(self, key)
            if key == "explicit_layers":
                value = [layer.to_dict() for layer in value]
            elif key == "base_channels":
                value = list(value)
            out[key] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported ArchSpec schema_version {version!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown ArchSpec fields: {sorted(extra)}")
        family = d.get("family")
        if family in RELEVANT_FIELDS:
            # irrelevant scale fields are ignored rather than rejected
            scale = {"base_channels", "widen_factor", "cardinality", "growth_rate",
                     "additional_rate", "explicit_layers"}
            for key in scale - set(RELEVANT_FIELDS[family]):
                d.pop(key, None)
        if d.get("base_channels") is not None:
            d["base_channels"] = tuple(d["base_channels"])
        if d.get("explicit_layers") is not None:
            d["explicit_layers"] = tuple(LayerSpec.from_dict(l) for l in d["explicit_layers"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid ArchSpec JSON: {exc}") from None

    def replace(self, **changes) -> "ArchSpec":
        return dataclasses.replace(self, **changes)


def load_spec(path: str | Path) -> ArchSpec:
    return ArchSpec.from_json(Path(path).read_text())


def save_spec(spec: ArchSpec, path: str | Path) -> None:
    Path(path).write_text(spec.to_json())


def stage_widths(spec: ArchSpec) -> list[int]:
    """Channel list in the form the division tables are usually quoted in."""
    fam = spec.family
    if fam in ("wrn", "shake-shake"):
        base = spec.base_channels
        w = spec.widen_factor
        if fam == "shake-shake":
            stem = base[0]
            return [stem] + [int(round(stem * w * m)) for m in (1, 2, 4)]
        return [base[0]] + [int(round(c * w)) for c in base]
    if fam == "resnext":
        return [spec.cardinality * spec.base_channels[0] * 2 ** k for k in range(3)]
    if spec.base_channels is None:
        raise UnsupportedFamilyError(f"family {fam!r} has no channel list")
    return list(spec.base_channels)


# ---------------------------------------------------------------------------
# cost model


def conv_params(layer: LayerSpec) -> int:
    if layer.kind in ("avg-pool", "global-pool"):
        return 0
    if layer.kind == "fully-connected":
        return layer.in_channels * layer.out_channels
    return layer.kernel ** 2 * (layer.in_channels // layer.groups) * layer.out_channels


def conv_flops(layer: LayerSpec, convention: str = "mac") -> int:
    if convention not in CONVENTIONS:
        raise ValidationError(f"unknown FLOP convention {convention!r}")
    k2 = layer.kernel ** 2
    hw = layer.out_height * layer.out_width
    if layer.kind in ("avg-pool", "global-pool"):
        # one accumulate per window element, same under both conventions
        return k2 * hw * layer.out_channels
    fan_in = k2 * (layer.in_channels // layer.groups)
    if convention == "eq3":
        return (2 * fan_in - 1) * hw * layer.out_channels
    return fan_in * hw * layer.out_channels


@dataclass(frozen=True)
class CostReport:
    total_params: int
    total_flops: int
    convention: str
    per_layer: tuple[tuple[int, int, int], ...] = field(default_factory=tuple)
    name: str = ""
    kinds: tuple[str, ...] = field(default_factory=tuple, compare=False)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "convention": self.convention,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "per_layer": [
                {"index": i, "params": p, "flops": f} for i, p, f in self.per_layer
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        lines = [
            f"# {self.name}  convention={self.convention}",
            "# biases and batch-norm parameters excluded",
        ]
        header = ("layer", "kind", "params", "flops")
        rows = [
            (str(i), self.kinds[i] if i < len(self.kinds) else "", f"{p:,}", f"{f:,}")
            for i, p, f in self.per_layer
        ]
        rows.append(("total", "", f"{self.total_params:,}", f"{self.total_flops:,}"))
        widths = [max(len(r[c]) for r in [header, *rows]) for c in range(4)]
        fmt = "  ".join(["{:<%d}" % widths[0], "{:<%d}" % widths[1],
                         "{:>%d}" % widths[2], "{:>%d}" % widths[3]])
        lines.append(fmt.format(*header))
        lines.extend(fmt.format(*r) for r in rows)
        lines.append(f"# params {self.total_params / 1e6:.2f} M, "
                     f"GFLOPs {self.total_flops / 1e9:.3f}")
        return "\n".join(lines) + "\n"


def _conv(c_in, c_out, k, res, stride=1, groups=1):
    return LayerSpec("conv", c_in, c_out, kernel=k, groups=groups, stride=stride,
                     out_height=res, out_width=res)


def _head(c_in, res, num_classes):
    return [
        LayerSpec("global-pool", c_in, c_in, kernel=res),
        LayerSpec("fully-connected", c_in, num_classes),
    ]


def _expand_wrn(spec: ArchSpec) -> list[LayerSpec]:
    n = (spec.depth - 4) // 6
    base = spec.base_channels
    widths = [int(round(c * spec.widen_factor)) for c in base]
    res = spec.input_resolution
    layers = [_conv(_IMAGE_CHANNELS, base[0], 3, res)]
    c_in = base[0]
    for stage, width in enumerate(widths):
        for b in range(n):
            s = 2 if stage > 0 and b == 0 else 1
            res = res // s
            layers.append(_conv(c_in, width, 3, res, stride=s))
            layers.append(_conv(width, width, 3, res))
            if c_in != width or s != 1:
                layers.append(_conv(c_in, width, 1, res, stride=s))
            c_in = width
    return layers + _head(c_in, res, spec.num_classes)


def _expand_bottleneck(spec: ArchSpec) -> list[LayerSpec]:
    n = (spec.depth - 2) // 9
    base = spec.base_channels
    res = spec.input_resolution
    layers = [_conv(_IMAGE_CHANNELS, base[0], 3, res)]
    c_in = base[0]
    for stage, width in enumerate(base):
        out = 4 * width
        for b in range(n):
            s = 2 if stage > 0 and b == 0 else 1
            layers.append(_conv(c_in, width, 1, res))
            res = res // s
            layers.append(_conv(width, width, 3, res, stride=s))
            layers.append(_conv(width, out, 1, res))
            if c_in != out or s != 1:
                layers.append(_conv(c_in, out, 1, res, stride=s))
            c_in = out
    return layers + _head(c_in, res, spec.num_classes)


def _expand_resnext(spec: ArchSpec) -> list[LayerSpec]:
    n = (spec.depth - 2) // 9
    d = spec.cardinality
    res = spec.input_resolution
    layers = [_conv(_IMAGE_CHANNELS, _RESNEXT_STEM, 3, res)]
    c_in = _RESNEXT_STEM
    for stage, out in enumerate(_RESNEXT_STAGE_OUT):
        inner = d * spec.base_channels[0] * 2 ** stage
        for b in range(n):
            s = 2 if stage > 0 and b == 0 else 1
            layers.append(_conv(c_in, inner, 1, res))
            res = res // s
            layers.append(_conv(inner, inner, 3, res, stride=s, groups=d))
            layers.append(_conv(inner, out, 1, res))
            if c_in != out or s != 1:
                layers.append(_conv(c_in, out, 1, res, stride=s))
            c_in = out
    return layers + _head(c_in, res, spec.num_classes)


_EXPANDERS = {
    "wrn": _expand_wrn,
    "resnet-cifar-bottleneck": _expand_bottleneck,
    "resnext": _expand_resnext,
    "generic": lambda spec: list(spec.explicit_layers),
}


def expand(spec: ArchSpec) -> list[LayerSpec]:
    """Full, deterministic layer list of a preset family."""
    try:
        expander = _EXPANDERS[spec.family]
    except KeyError:
        raise UnsupportedFamilyError(
            f"no layer preset for family {spec.family!r}; "
            f"cost presets exist for {sorted(_EXPANDERS)}") from None
    return expander(spec)


def cost_report(spec: ArchSpec, convention: str = "mac") -> CostReport:
    layers = expand(spec)
    per_layer = tuple((i, conv_params(l), conv_flops(l, convention)) for i, l in enumerate(layers))
    return CostReport(
        total_params=sum(p for _, p, _ in per_layer),
        total_flops=sum(f for _, _, f in per_layer),
        convention=convention,
        per_layer=per_layer,
        name=spec.name,
        kinds=tuple(l.kind for l in layers),
    )


def layers_to_json(layers: Iterable[LayerSpec]) -> str:
    return json.dumps([l.to_dict() for l in layers], sort_keys=True)


def mlp_spec(name: str, in_features: int, hidden: Sequence[int], num_classes: int) -> ArchSpec:
    """Generic fully-connected spec: in -> hidden... -> num_classes."""
    widths = [in_features, *hidden, num_classes]
    layers = tuple(LayerSpec("fully-connected", a, b) for a, b in zip(widths[:-1], widths[1:]))
    return ArchSpec(name=name, family="generic", depth=len(layers),
                    num_classes=num_classes, explicit_layers=layers)



def conv_spec(name: str, in_channels: int, widths: Sequence[int], num_classes: int,
              resolution: int) -> ArchSpec:
    """Generic conv stack: 3x3 convs (stride 2 from the second on), global pool, classifier."""
    layers = []
    c_in, res = in_channels, resolution
    for i, w in enumerate(widths):
        s = 2 if i > 0 else 1
        res = max(res // s, 1)
        layers.append(LayerSpec("conv", c_in, w, kernel=3, stride=s, out_height=res, out_width=res))
        c_in = w
    layers.append(LayerSpec("global-pool", c_in, c_in, kernel=res))
    layers.append(LayerSpec("fully-connected", c_in, num_classes))
    return ArchSpec(name=name, family="generic", depth=len(layers), num_classes=num_classes,
                    input_resolution=resolution, explicit_layers=tuple(layers))
