import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitnet.ensemble import EnsembleRule, accuracy, combine, predict, weight_spread
from splitnet.errors import ValidationError

RULES = [EnsembleRule(c, s) for c, s in itertools.product(["average", "max-confidence"], [False, True])]


def scores(seed, s=3, n=6, c=4):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((n, c)) for _ in range(s)]


class TestCombine:
    def test_single_member_unchanged(self):
        (z,) = scores(0, s=1)
        for rule in RULES:
            if not rule.apply_softmax_first:
                assert np.array_equal(combine(rule, [z]), z)

    def test_identical_members_agree(self):
        z = scores(1, s=1)[0]
        preds = {tuple(predict(rule, [z, z, z])) for rule in RULES}
        assert len(preds) == 1

    def test_average_matches_per_sample_oracle(self):
        zs = scores(2)
        out = combine(EnsembleRule(), zs)
        for n in range(6):
            for c in range(4):
                assert out[n, c] == pytest.approx(sum(z[n, c] for z in zs) / 3, abs=1e-12)

    def test_max_confidence_picks_rows(self):
        a = np.array([[0.9, 0.1], [0.4, 0.6]])
        b = np.array([[0.2, 0.8], [0.05, 0.95]])
        out = combine(EnsembleRule("max"), [a, b])
        assert np.array_equal(out, np.array([[0.9, 0.1], [0.05, 0.95]]))

    def test_max_confidence_tie_goes_to_lowest_index(self):
        a = np.array([[0.7, 0.3]])
        b = np.array([[0.3, 0.7]])
        assert np.array_equal(combine(EnsembleRule("max-confidence"), [a, b]), a)

    def test_max_confidence_brute_force(self):
        zs = scores(3)
        out = combine(EnsembleRule("max-confidence"), zs)
        for n in range(6):
            best = max(range(3), key=lambda i: (zs[i][n].max(), -i))
            assert np.array_equal(out[n], zs[best][n])

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            combine(EnsembleRule(), [np.zeros((2, 3)), np.zeros((3, 3))])
        with pytest.raises(ValidationError):
            combine(EnsembleRule(), [])

    def test_unknown_rule(self):
        with pytest.raises(ValidationError):
            EnsembleRule("median")

    def test_accuracy(self):
        assert accuracy(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0])) == 0.5


@given(st.integers(0, 2**32), st.integers(1, 4))
@settings(max_examples=50)
def test_average_argmax_invariant_to_per_sample_shift(seed, s):
    zs = scores(seed, s)
    shift = np.random.default_rng(seed + 1).standard_normal((6, 1)) * 10
    rule = EnsembleRule()
    assert np.array_equal(predict(rule, zs), predict(rule, [z + shift for z in zs]))


@given(st.integers(0, 2**32), st.integers(1, 4), st.integers(2, 7))
@settings(max_examples=50)
def test_predicted_class_in_range(seed, s, c):
    zs = scores(seed, s, c=c)
    for rule in RULES:
        p = predict(rule, zs)
        assert p.min() >= 0 and p.max() < c


class TestWeightSpread:
    def test_identical_vectors(self):
        w = np.arange(10.0)
        spread = weight_spread([w, w, w])
        assert spread.std == 0.0 and not spread.coords.any()

    def test_two_points(self):
        a, b = np.zeros(5), np.array([3.0, 4.0, 0, 0, 0])
        spread = weight_spread([a, b])
        d = np.linalg.norm(a - b)
        # two points project to +-d/2 on the first axis and 0 on the second
        assert sorted(spread.coords[:, 0]) == pytest.approx([-d / 2, d / 2])
        assert np.allclose(spread.coords[:, 1], 0.0)
        assert spread.std == pytest.approx(d / (2 * math.sqrt(2)))

    def test_matches_covariance_eigen_oracle(self):
        rng = np.random.default_rng(0)
        ws = [rng.standard_normal(12) for _ in range(4)]
        x = np.stack(ws) - np.mean(ws, axis=0)
        evals, evecs = np.linalg.eigh(x.T @ x)  # dim x dim
        top = evecs[:, np.argsort(evals)[::-1][:2]]
        oracle = x @ top
        spread = weight_spread(ws)
        assert spread.std == pytest.approx(oracle.std(), abs=1e-8)
        assert np.allclose(np.abs(spread.coords), np.abs(oracle), atol=1e-8)

    @given(st.integers(0, 2**32))
    @settings(max_examples=25)
    def test_rotation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        ws = [rng.standard_normal(6) for _ in range(4)]
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        assert weight_spread([q @ w for w in ws]).std == pytest.approx(weight_spread(ws).std, abs=1e-9)

    def test_needs_two_members(self):
        with pytest.raises(ValidationError):
            weight_spread([np.zeros(3)])


def test_views_spread_members_at_least_as_far():
    # directional claim only: final-layer spread with views >= without, median over seeds
    from splitnet.archspec import mlp_spec
    from splitnet.cotrain import TrainConfig, train
    from splitnet.datagen import make_split

    def head(model):
        names = [n for n, _ in model.named_params()]
        return np.concatenate([model.param(n).ravel() for n in names[-2:]])

    spreads = {True: [], False: []}
    for seed in range(5):
        tr, te = make_split("spirals", 1000, 200, noise=0.15, seed=seed)
        for views in (True, False):
            cfg = TrainConfig(S=4, max_epoch=30, slow_epoch=2, cot_warm_epochs=10, base_seed=seed,
                              transforms=None if views else [])
            models = train(cfg, mlp_spec("m", 2, [16, 16], 3), tr, te).models
            spreads[views].append(weight_spread([head(m) for m in models]).std)
    assert np.median(spreads[True]) >= np.median(spreads[False])
