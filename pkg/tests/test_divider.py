import math

import pytest
from hypothesis import given, strategies as st

from splitnet.archspec import ArchSpec, cost_report, mlp_spec, stage_widths
from splitnet.divider import (
    WdPolicy,
    divide_arch,
    divide_cardinality,
    divide_channels,
    divide_rate,
    divide_wd,
    divide_widen,
    round_even,
)
from splitnet.errors import UnsupportedPresetError, ValidationError


@pytest.mark.parametrize("x, expected", [(11.31, 12), (22.63, 22), (4.0, 4), (3.0, 4), (0.3, 2)])
def test_round_even(x, expected):
    assert round_even(x) == expected


def test_round_even_rejects_nonpositive():
    with pytest.raises(ValidationError):
        round_even(0.0)


@given(st.floats(0.01, 1e4))
def test_round_even_is_nearest_even(x):
    r = round_even(x)
    assert r % 2 == 0 and r >= 2
    if x >= 1:
        assert abs(r - x) <= 1.0


@pytest.mark.parametrize("S, expected", [(1, [16, 32, 64]), (2, [12, 24, 48]), (4, [8, 16, 32])])
def test_divide_channels_resnet(S, expected):
    assert divide_channels([16, 32, 64], S) == expected


def test_divide_channels_logs_gcd_rounding():
    log = []
    divide_channels([16, 32, 64], 2, log, "base_channels")
    (entry,) = log
    assert entry.field == "base_channels.gcd"
    assert entry.exact == pytest.approx(16 / math.sqrt(2))
    assert entry.rounded == 12


def test_divide_channels_empty():
    with pytest.raises(ValidationError):
        divide_channels([], 2)


@pytest.mark.parametrize("w, S, expected", [(10, 2, 7), (10, 4, 5), (1, 4, 1), (8, 2, 6), (10, 1, 10)])
def test_divide_widen(w, S, expected):
    assert divide_widen(w, S) == expected


@pytest.mark.parametrize("d, S, expected", [(8, 2, 4), (8, 4, 2), (3, 4, 1)])
def test_divide_cardinality(d, S, expected):
    assert divide_cardinality(d, S) == expected


def test_divide_rate():
    assert divide_rate(40, 2, "densenet_growth") == 28
    assert divide_rate(0.5, 4, "drop_ratio") == 0.25
    assert divide_rate(84.0, 1, "pyramid_additional") == 84.0
    assert divide_rate(84.0, 4, "pyramid_additional") == 42.0
    with pytest.raises(ValidationError):
        divide_rate(1.0, 2, "dropout")


def test_divide_wd():
    assert divide_wd(WdPolicy("exponential", 5e-4), 2) == pytest.approx(3.0327e-4, abs=1e-8)
    assert divide_wd(WdPolicy("linear", 1e-4), 4) == pytest.approx(2.5e-5, rel=1e-12)
    assert divide_wd(WdPolicy("none", 7e-4), 4) == 7e-4


def test_exponential_wd_monotone_in_inverse_s():
    policy = WdPolicy("exponential", 1e-3)
    values = [divide_wd(policy, S) for S in range(1, 20)]
    # 1/S decreases as S grows, so wd* decreases
    assert all(a > b for a, b in zip(values, values[1:]))


def test_wd_policy_validation():
    with pytest.raises(ValidationError):
        WdPolicy("cubic", 1e-4)
    with pytest.raises(ValidationError):
        WdPolicy("none", 0.0)
    assert WdPolicy("exp", 1e-4).kind == "exponential"


class TestDivideArch:
    def test_identity(self):
        spec = ArchSpec("w", "wrn", 28, widen_factor=10, drop_ratio=0.3)
        plan = divide_arch(spec, 1, WdPolicy("exponential", 5e-4))
        assert plan.members == [spec]
        assert plan.adjusted_wd == 5e-4

    def test_resnet(self):
        plan = divide_arch(ArchSpec("r", "resnet-cifar-bottleneck", 164), 2)
        assert len(plan.members) == 2
        assert all(m.base_channels == (12, 24, 48) for m in plan.members)
        assert all(e.rounded % 2 == 0 for e in plan.rounding_log if e.is_channel)

    def test_se_resnet_same_as_resnet(self):
        plan = divide_arch(ArchSpec("r", "se-resnet-cifar", 164), 4)
        assert plan.members[0].base_channels == (8, 16, 32)

    def test_efficientnet_presets(self):
        spec = ArchSpec("e", "efficientnet", 18)
        assert list(divide_arch(spec, 2).members[0].base_channels) == [24, 12, 16, 24, 56, 80, 136, 224, 920]
        assert list(divide_arch(spec, 4).members[0].base_channels) == [16, 12, 16, 20, 40, 56, 96, 160, 640]

    def test_efficientnet_unsupported_s(self):
        with pytest.raises(UnsupportedPresetError):
            divide_arch(ArchSpec("e", "efficientnet", 18), 3)

    def test_shake_shake(self):
        spec = ArchSpec("ss", "shake-shake", 26, widen_factor=6)
        assert stage_widths(spec) == [16, 96, 192, 384]
        assert stage_widths(divide_arch(spec, 2).members[0]) == [16, 64, 128, 256]
        assert stage_widths(divide_arch(spec, 4).members[0]) == [16, 48, 96, 192]

    def test_resnext(self):
        plan = divide_arch(ArchSpec("x", "resnext", 29, cardinality=8), 2)
        assert plan.members[0].cardinality == 4
        assert plan.members[0].base_channels == (64,)

    def test_densenet_and_drop(self):
        plan = divide_arch(ArchSpec("d", "densenet", 190, growth_rate=40, drop_ratio=0.2), 2)
        assert plan.members[0].growth_rate == 28
        assert plan.members[0].drop_ratio == pytest.approx(0.2 / math.sqrt(2))

    def test_pyramidnet_keeps_base_channel(self):
        spec = ArchSpec("p", "pyramidnet-shakedrop", 272, additional_rate=200, drop_ratio=0.5)
        member = divide_arch(spec, 4).members[0]
        assert member.base_channels == (16,)
        assert member.additional_rate == 100
        assert member.drop_ratio == 0.25

    def test_generic_keeps_io_dims(self):
        plan = divide_arch(mlp_spec("m", 2, [64, 64], 3), 2)
        layers = plan.members[0].explicit_layers
        assert layers[0].in_channels == 2 and layers[-1].out_channels == 3
        assert [l.out_channels for l in layers[:-1]] == [46, 46]
        assert plan.rounding_log[0].rounded == 46

    def test_members_share_scale_fields(self):
        plan = divide_arch(ArchSpec("w", "wrn", 28, widen_factor=10), 4, WdPolicy("linear", 1e-4))
        assert len({m.replace(name="") for m in plan.members}) == 1
        assert plan.adjusted_wd == pytest.approx(2.5e-5)

    def test_deterministic_serialization(self):
        spec = ArchSpec("w", "wrn", 28, widen_factor=10)
        assert divide_arch(spec, 2).to_json() == divide_arch(spec, 2).to_json()

    @pytest.mark.parametrize("depth, w", [(28, 10), (40, 10)])
    @pytest.mark.parametrize("S", [2, 4])
    def test_wrn_cost_parity(self, depth, w, S):
        spec = ArchSpec("w", "wrn", depth, widen_factor=w)
        member = divide_arch(spec, S).members[0]
        ratio = S * cost_report(member).total_params / cost_report(spec).total_params
        assert 0.90 <= ratio <= 1.10

    def test_wrn_16_8_rounding_overshoots(self):
        # w = 8 / sqrt(2) = 5.66 rounds up to 6; the published counts are 11.0 M -> 12.4 M
        spec = ArchSpec("w", "wrn", 16, widen_factor=8)
        member = divide_arch(spec, 2).members[0]
        ratio = 2 * cost_report(member).total_params / cost_report(spec).total_params
        assert ratio == pytest.approx(12.4 / 11.0, abs=0.02)

    def test_bad_s(self):
        with pytest.raises(ValidationError):
            divide_arch(ArchSpec("w", "wrn", 28), 0)
