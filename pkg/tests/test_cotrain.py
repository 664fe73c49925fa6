import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from splitnet.archspec import mlp_spec
from splitnet.cotrain import (
    TrainConfig,
    cot_loss,
    cross_entropy,
    lambda_schedule,
    lr_schedule,
    softmax,
    total_loss,
    train,
)
from splitnet.datagen import make_split
from splitnet.errors import DivergenceError, ValidationError


def rand_probs(rng, n, c):
    p = rng.random((n, c)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(np.zeros((2, 4))), 0.25)

    def test_closed_form(self):
        assert np.allclose(softmax([[0.0, math.log(3)]]), [[0.25, 0.75]], atol=1e-15)

    def test_large_logits_stable(self):
        p = softmax([[1000.0, 0.0]])
        assert np.all(np.isfinite(p)) and p[0, 0] == 1.0

    def test_nan(self):
        with pytest.raises(ValidationError):
            softmax([[np.nan, 0.0]])

    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_shift_invariant(self, z, c):
        assert np.allclose(softmax(z), softmax(z + c), atol=1e-12)


class TestCrossEntropy:
    def test_one_hot(self):
        assert cross_entropy(np.eye(3), np.arange(3)) == 0.0

    def test_uniform_ten_classes(self):
        assert cross_entropy(np.full((4, 10), 0.1), np.arange(4)) == pytest.approx(math.log(10), abs=1e-10)

    def test_matches_per_sample_oracle(self):
        rng = np.random.default_rng(0)
        p = rand_probs(rng, 3, 4)
        y = np.array([2, 0, 3])
        oracle = sum(-math.log(p[n, y[n]]) for n in range(3)) / 3
        assert cross_entropy(p, y) == pytest.approx(oracle, abs=1e-12)

    def test_mixup(self):
        rng = np.random.default_rng(1)
        p = rand_probs(rng, 5, 3)
        ya, yb = np.array([0, 1, 2, 0, 1]), np.array([2, 2, 1, 0, 0])
        mixed = cross_entropy(p, ya, (ya, yb, 0.3))
        assert mixed == pytest.approx(0.3 * cross_entropy(p, ya) + 0.7 * cross_entropy(p, yb), abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            cross_entropy(np.full((1, 3), 1 / 3), [3])


class TestCotLoss:
    def test_identical_members(self):
        p = rand_probs(np.random.default_rng(0), 4, 3)
        assert cot_loss([p, p, p]) == pytest.approx(0.0, abs=1e-15)

    def test_disjoint_one_hots(self):
        assert cot_loss([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]) == pytest.approx(math.log(2), abs=1e-10)

    def test_matches_entropy_oracle(self):
        rng = np.random.default_rng(2)
        ps = [rand_probs(rng, 4, 5) for _ in range(3)]

        def h(row):
            return -sum(v * math.log(v) for v in row if v > 0)

        oracle = 0.0
        for n in range(4):
            mean = [sum(p[n, c] for p in ps) / 3 for c in range(5)]
            oracle += h(mean) - sum(h(p[n]) for p in ps) / 3
        assert cot_loss(ps) == pytest.approx(oracle / 4, abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            cot_loss([np.full((2, 3), 1 / 3), np.full((3, 3), 1 / 3)])

    def test_bounds_on_random_sets(self):
        rng = np.random.default_rng(3)
        for _ in range(10_000):
            s = int(rng.integers(2, 6))
            c = int(rng.integers(2, 6))
            ps = [rng.dirichlet(np.full(c, 0.3), size=2) for _ in range(s)]
            assert 0.0 <= cot_loss(ps) <= math.log(s)

    @given(st.integers(0, 2**32), st.integers(2, 5))
    @settings(max_examples=50)
    def test_permutation_invariant(self, seed, s):
        rng = np.random.default_rng(seed)
        ps = [rand_probs(rng, 3, 4) for _ in range(s)]
        perm = rng.permutation(s)
        assert cot_loss(ps) == pytest.approx(cot_loss([ps[i] for i in perm]), abs=1e-12)


CFG = TrainConfig(max_epoch=200, slow_epoch=5, lr=0.1, lambda_cot=0.5, cot_warm_epochs=40)


class TestSchedules:
    @pytest.mark.parametrize("epoch, expected", [(0, 0.0), (20, 0.25), (40, 0.5), (120, 0.5)])
    def test_lambda(self, epoch, expected):
        assert lambda_schedule(epoch, CFG) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("epoch, expected", [(0, 0.0), (5, 0.1), (102.5, 0.05), (200, 0.0)])
    def test_lr(self, epoch, expected):
        assert lr_schedule(epoch, CFG) == pytest.approx(expected, abs=1e-12)

    def test_lr_continuous_and_decaying(self):
        assert lr_schedule(5 - 1e-9, CFG) == pytest.approx(lr_schedule(5, CFG), abs=1e-9)
        values = [lr_schedule(e, CFG) for e in range(5, 201)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_lambda_monotone_and_clamped(self):
        values = [lambda_schedule(e, CFG) for e in range(200)]
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert max(values) == CFG.lambda_cot

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(max_epoch=5, slow_epoch=5)
        with pytest.raises(ValidationError):
            TrainConfig(lambda_cot=-1)
        with pytest.raises(ValidationError):
            TrainConfig.from_dict({"learning_rate": 0.1})


class TestTotalLoss:
    def test_lambda_zero_is_ce_sum(self):
        rng = np.random.default_rng(0)
        zs = [rng.standard_normal((6, 4)) for _ in range(3)]
        y = rng.integers(0, 4, 6)
        terms = total_loss(zs, y, 0.0)
        expected = sum(cross_entropy(softmax(z), y) for z in zs)
        assert terms.total == pytest.approx(expected, abs=1e-12)

    def test_identical_members_have_zero_cot(self):
        z = np.random.default_rng(1).standard_normal((5, 3))
        terms = total_loss([z, z], np.zeros(5, int), 0.5)
        assert terms.cot == pytest.approx(0.0, abs=1e-15)
        assert terms.total == pytest.approx(2 * cross_entropy(softmax(z), np.zeros(5, int)), abs=1e-12)

    def test_single_member(self):
        z = np.random.default_rng(2).standard_normal((5, 3))
        terms = total_loss([z], np.arange(5) % 3, 0.5)
        assert terms.cot == 0.0 and terms.total == terms.ce[0]

    @pytest.mark.parametrize("mixed", [False, True])
    def test_gradient_matches_finite_differences(self, mixed):
        rng = np.random.default_rng(3)
        s, n, c = 3, 4, 5
        zs = [rng.standard_normal((n, c)) for _ in range(s)]
        y = rng.integers(0, c, n)
        mixes = [(y, rng.integers(0, c, n), 0.7)] * s if mixed else None
        terms = total_loss(zs, y, 0.8, mixes)
        eps = 1e-6
        for i in range(s):
            for idx in np.ndindex(n, c):
                zp = [z.copy() for z in zs]
                zm = [z.copy() for z in zs]
                zp[i][idx] += eps
                zm[i][idx] -= eps
                num = (total_loss(zp, y, 0.8, mixes).total - total_loss(zm, y, 0.8, mixes).total) / (2 * eps)
                assert terms.grad_logits[i][idx] == pytest.approx(num, rel=1e-5, abs=1e-9)


def small_run(**kw):
    cfg = TrainConfig(**{"S": 2, "max_epoch": 4, "slow_epoch": 1, "cot_warm_epochs": 2,
                         "batch_size": 32, **kw})
    tr, te = make_split("spirals", 200, 60, seed=0)
    return train(cfg, mlp_spec("m", 2, [12], 3), tr, te)


class TestTrain:
    def test_record_shape(self):
        rec = small_run().record
        assert len(rec.epochs) == 4
        assert rec.header() == ["epoch", "lr", "lambda", "ce_member_0", "ce_member_1", "cot",
                                "acc_member_0", "acc_member_1", "acc_ensemble"]
        assert all(0 <= a <= 1 for e in rec.epochs for a in (*e.acc, e.acc_ensemble))

    def test_deterministic(self):
        assert small_run().record.to_csv() == small_run().record.to_csv()

    def test_workers_do_not_change_the_record(self):
        assert small_run(workers=2).record.to_csv() == small_run(workers=1).record.to_csv()

    def test_single_member_is_plain_training(self):
        rec = small_run(S=1).record
        assert all(e.cot == 0.0 and e.lam == 0.0 for e in rec.epochs)
        assert rec.header()[-3:] == ["cot", "acc_member_0", "acc_ensemble"]

    def test_divergence(self):
        with pytest.raises(DivergenceError, match="epoch"):
            with np.errstate(over="ignore", invalid="ignore"):
                small_run(lr=1e200, slow_epoch=0)

    def test_writes_outputs(self, tmp_path):
        result = small_run(max_epoch=2, cot_warm_epochs=1)
        assert not result.record.checkpoints
        cfg = TrainConfig(S=2, max_epoch=2, slow_epoch=1, cot_warm_epochs=1)
        tr, te = make_split("spirals", 100, 30, seed=0)
        rec = train(cfg, mlp_spec("m", 2, [8], 3), tr, te, tmp_path).record
        assert (tmp_path / "metrics.csv").read_text() == rec.to_csv()
        assert [p.rsplit("/", 1)[-1] for p in rec.checkpoints] == ["member_0.splt", "member_1.splt"]
