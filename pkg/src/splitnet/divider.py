"""Turn one wide ArchSpec into S thinner member specs.

Channel widths scale by ``1/sqrt(S)`` so that each member keeps about ``1/S``
of the parameters and FLOPs. Grouped families divide the group count by
``S`` instead, and growth/additional/drop rates divide by ``sqrt(S)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import reduce

from .archspec import EFFICIENTNET_B0_CHANNELS, ArchSpec, LayerSpec
from .errors import UnsupportedPresetError, ValidationError

WD_POLICIES = ("none", "exponential", "linear")
RATE_KINDS = ("densenet_growth", "pyramid_additional", "drop_ratio")

EFFICIENTNET_PRESETS = {
    1: EFFICIENTNET_B0_CHANNELS,
    2: (24, 12, 16, 24, 56, 80, 136, 224, 920),
    4: (16, 12, 16, 20, 40, 56, 96, 160, 640),
}


@dataclass(frozen=True)
class WdPolicy:
    kind: str = "none"
    base_wd: float = 1e-4

    def __post_init__(self):
        kind = {"exp": "exponential"}.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in WD_POLICIES:
            raise ValidationError(f"unknown weight-decay policy {self.kind!r}")
        if not self.base_wd > 0:
            raise ValidationError(f"base_wd must be positive, got {self.base_wd}")


@dataclass(frozen=True)
class RoundingEntry:
    field: str
    exact: float
    rounded: float
    is_channel: bool = True


@dataclass
class DivisionPlan:
    S: int
    members: list[ArchSpec]
    adjusted_wd: float
    rounding_log: list[RoundingEntry] = field(default_factory=list)
    wd_policy: WdPolicy | None = None

    def to_dict(self) -> dict:
        return {
            "S": self.S,
            "adjusted_wd": self.adjusted_wd,
            "wd_policy": None if self.wd_policy is None else {
                "kind": self.wd_policy.kind, "base_wd": self.wd_policy.base_wd},
            "rounding_log": [
                {"field": e.field, "exact": e.exact, "rounded": e.rounded}
                for e in self.rounding_log
            ],
            "members": [m.to_dict() for m in self.members],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_s(S):
    if isinstance(S, bool) or not isinstance(S, int) or S < 1:
        raise ValidationError(f"S must be an integer >= 1, got {S!r}")


def round_even(x: float) -> int:
    """Nearest even integer to ``x``; odd integers (ties) round up; never below 2."""
    if not x > 0:
        raise ValidationError(f"round_even needs x > 0, got {x}")
    return max(2 * math.floor(x / 2 + 0.5), 2)


def divide_channels(channels, S: int, log: list | None = None, name: str = "channels") -> list[int]:
    """Replace the GCD ``g`` of ``channels`` by ``round_even(g / sqrt(S))`` and rescale."""
    _check_s(S)
    channels = [int(c) for c in channels]
    if not channels:
        raise ValidationError("divide_channels needs at least one channel count")
    if S == 1:
        return channels
    g = reduce(math.gcd, channels)
    exact_g = g / math.sqrt(S)
    g_new = round_even(exact_g)
    if log is not None:
        log.append(RoundingEntry(f"{name}.gcd", exact_g, g_new))
    # every c is a multiple of g, so c * g_new / g is an even integer
    return [c // g * g_new for c in channels]


def divide_widen(w: float, S: int) -> int:
    _check_s(S)
    return max(math.floor(w / math.sqrt(S) + 0.4), 1)


def divide_cardinality(d_card: int, S: int) -> int:
    _check_s(S)
    return max(d_card // S, 1)


def divide_rate(rate: float, S: int, rate_kind: str = "drop_ratio") -> float:
    _check_s(S)
    if rate_kind not in RATE_KINDS:
        raise ValidationError(f"unknown rate kind {rate_kind!r}; expected one of {RATE_KINDS}")
    if S == 1:
        return rate
    if rate_kind == "densenet_growth":
        return 0.5 * math.floor(2 * rate / math.sqrt(S))
    return rate / math.sqrt(S)


def divide_wd(policy: WdPolicy, S: int) -> float:
    _check_s(S)
    if policy.kind == "exponential":
        return policy.base_wd * math.exp(1.0 / S - 1.0)
    if policy.kind == "linear":
        return policy.base_wd / S
    return policy.base_wd


def _divide_generic(spec: ArchSpec, S: int, log: list) -> tuple[LayerSpec, ...]:
    layers = spec.explicit_layers
    # hidden widths: every layer output except the classifier's
    hidden_idx = [i for i, l in enumerate(layers[:-1])
                  if l.kind in ("conv", "fully-connected")]
    new_widths = divide_channels([layers[i].out_channels for i in hidden_idx], S, log,
                                 name="explicit_layers.out_channels")
    mapping = dict(zip(hidden_idx, new_widths))
    out = []
    c_in = layers[0].in_channels
    for i, layer in enumerate(layers):
        if layer.kind in ("avg-pool", "global-pool"):
            c_out = c_in
        elif layer.kind == "depthwise-conv":
            c_out = c_in
        else:
            c_out = mapping.get(i, layer.out_channels)
        groups = layer.groups
        if layer.kind == "depthwise-conv":
            groups = c_in
        elif groups > 1 and (c_in % groups or c_out % groups):
            raise ValidationError(
                f"layer {i}: divided widths {c_in}->{c_out} not divisible by groups={groups}")
        out.append(LayerSpec(layer.kind, c_in, c_out, kernel=layer.kernel, groups=groups,
                             stride=layer.stride, out_height=layer.out_height,
                             out_width=layer.out_width))
        c_in = c_out
    return tuple(out)


def divide_arch(spec: ArchSpec, S: int, policy: WdPolicy | None = None) -> DivisionPlan:
    """Dispatch the per-family division rules and build the member specs."""
    _check_s(S)
    policy = policy or WdPolicy()
    if S == 1:
        return DivisionPlan(1, [spec], divide_wd(policy, 1), [], policy)

    log: list[RoundingEntry] = []
    fam = spec.family
    changes: dict = {}
    if fam in ("resnet-cifar-bottleneck", "se-resnet-cifar"):
        changes["base_channels"] = tuple(divide_channels(spec.base_channels, S, log, "base_channels"))
    elif fam in ("wrn", "shake-shake"):
        w_new = divide_widen(spec.widen_factor, S)
        log.append(RoundingEntry("widen_factor", spec.widen_factor / math.sqrt(S), w_new,
                                 is_channel=False))
        changes["widen_factor"] = w_new
    elif fam == "resnext":
        changes["cardinality"] = divide_cardinality(spec.cardinality, S)
    elif fam == "densenet":
        g_new = divide_rate(spec.growth_rate, S, "densenet_growth")
        log.append(RoundingEntry("growth_rate", spec.growth_rate / math.sqrt(S), g_new,
                                 is_channel=False))
        changes["growth_rate"] = g_new
    elif fam == "pyramidnet-shakedrop":
        # base channel (16) is left alone; only the additional rate shrinks
        changes["additional_rate"] = divide_rate(spec.additional_rate, S, "pyramid_additional")
    elif fam == "efficientnet":
        if tuple(spec.base_channels) != EFFICIENTNET_B0_CHANNELS:
            raise UnsupportedPresetError(
                "efficientnet division presets exist only for the baseline channel list "
                f"{list(EFFICIENTNET_B0_CHANNELS)}")
        if S not in EFFICIENTNET_PRESETS:
            raise UnsupportedPresetError(
                f"efficientnet division presets exist for S in {sorted(EFFICIENTNET_PRESETS)}, got {S}")
        changes["base_channels"] = EFFICIENTNET_PRESETS[S]
    elif fam == "generic":
        changes["explicit_layers"] = _divide_generic(spec, S, log)

    if spec.drop_ratio > 0:
        changes["drop_ratio"] = divide_rate(spec.drop_ratio, S, "drop_ratio")

    members = [spec.replace(name=f"{spec.name}-div{S}-m{i}", **changes) for i in range(S)]
    return DivisionPlan(S, members, divide_wd(policy, S), log, policy)
