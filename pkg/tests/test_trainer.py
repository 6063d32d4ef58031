import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confreg.core import ValidationError
from confreg.metrics import pearson_r
from confreg.trainer import (
    LinearModel,
    TrainConfig,
    TrainState,
    clip_gradient,
    cosine_warm_restart_lr,
    cycle_lengths,
    cycle_position,
    huber_grad,
    huber_loss,
    init_params,
    loss_and_grad,
    optimizer_step,
    scheduled_lr,
    train,
)
from oracles import finite_difference, huber_reference


class TestHuber:
    @pytest.mark.parametrize("e, expected", [(0.0, 0.0), (0.3, 0.045), (1.0, 0.375), (-1.0, 0.375)])
    def test_values(self, e, expected):
        assert huber_loss(e, 0.5) == pytest.approx(expected, abs=1e-15)

    def test_continuous_at_kink(self):
        for e in (0.5, -0.5):
            quad = 0.5 * e * e
            lin = 0.5 * (abs(e) - 0.25)
            assert quad == lin == huber_loss(e, 0.5) == 0.125

    @pytest.mark.parametrize("e, g", [(0.3, 0.3), (2.0, 0.5), (-2.0, -0.5), (0.0, 0.0)])
    def test_grad(self, e, g):
        assert huber_grad(e, 0.5) == pytest.approx(g, abs=1e-15)

    def test_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            huber_loss(float("nan"))
        with pytest.raises(ValidationError):
            huber_grad(float("inf"))

    def test_vectorised(self):
        np.testing.assert_allclose(huber_loss(np.array([0.3, 1.0])), [0.045, 0.375])

    @given(e=st.floats(-50, 50), delta=st.floats(0.01, 5))
    def test_matches_piecewise_definition(self, e, delta):
        assert huber_loss(e, delta) == pytest.approx(huber_reference(e, delta), rel=1e-12, abs=1e-300)

    @given(e=st.floats(-50, 50), delta=st.floats(0.01, 5))
    def test_grad_bounded(self, e, delta):
        assert abs(huber_grad(e, delta)) <= delta


class TestSchedule:
    def test_endpoints(self):
        assert cosine_warm_restart_lr(0, 10, 5e-4, 1e-6) == 5e-4
        assert cosine_warm_restart_lr(10, 10, 5e-4, 1e-6) == 1e-6

    def test_midpoint(self):
        assert abs(cosine_warm_restart_lr(5, 10, 5e-4, 1e-6) - 2.505e-4) < 1e-12

    def test_cycles(self):
        assert cycle_lengths(10, 2, 3) == [10, 20, 40]
        restarts = [e for e in range(200) if cycle_position(e, 10, 2)[0] == 0]
        assert restarts[:4] == [0, 10, 30, 70]

    def test_zero_cycle(self):
        with pytest.raises(ValidationError):
            cosine_warm_restart_lr(0, 0, 1e-3, 0)

    def test_bounded_and_restarts_at_max(self):
        cfg = TrainConfig()
        lrs = [scheduled_lr(e, cfg) for e in range(150)]
        assert all(cfg.lr_min <= lr <= cfg.lr_max for lr in lrs)
        for e in (0, 10, 30, 70):
            assert lrs[e] == cfg.lr_max
        # monotone non-increasing inside each cycle
        for start, end in ((0, 10), (10, 30), (30, 70), (70, 150)):
            seg = lrs[start:end]
            assert all(a >= b for a, b in zip(seg, seg[1:]))


class TestClip:
    def test_small_unchanged(self):
        g = np.array([0.3, 0.4])
        np.testing.assert_array_equal(clip_gradient(g, 1.0), g)

    def test_scale_down(self):
        np.testing.assert_allclose(clip_gradient(np.array([2.0, 0.0]), 1.0), [1.0, 0.0])
        np.testing.assert_allclose(clip_gradient(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])

    def test_dict_global_norm(self):
        out = clip_gradient({"a": np.array([3.0]), "b": np.array(4.0)}, 1.0)
        assert float(out["a"][0]) == pytest.approx(0.6)
        assert float(out["b"]) == pytest.approx(0.8)

    def test_non_finite(self):
        with pytest.raises(ValidationError):
            clip_gradient(np.array([np.nan, 1.0]))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10), st.floats(0.01, 10))
    def test_norm_and_idempotence(self, vals, max_norm):
        g = np.array(vals)
        once = clip_gradient(g, max_norm)
        norm = np.linalg.norm(g)
        assert np.linalg.norm(once) == pytest.approx(min(norm, max_norm), rel=1e-12, abs=1e-300)
        np.testing.assert_allclose(clip_gradient(once, max_norm), once, rtol=1e-12)


def scalar_reference(p, g, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float recurrence of the moment update with decoupled decay."""
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * (m_hat / (math.sqrt(v_hat) + eps)) - lr * wd * p
    return p


class TestOptimizer:
    def test_zero_grad_no_decay(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = {"w": np.array([1.0, -2.0])}
        new, _ = optimizer_step(p, {"w": np.zeros(2)}, TrainState.zeros_like(p), 0.1, cfg)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_decoupled_decay(self):
        cfg = TrainConfig(weight_decay=0.01)
        p = {"w": np.array([1.0, -2.0])}
        new, _ = optimizer_step(p, {"w": np.zeros(2)}, TrainState.zeros_like(p), 0.1, cfg)
        np.testing.assert_allclose(new["w"], p["w"] * (1 - 0.001), rtol=1e-15)

    @pytest.mark.parametrize("g", [0.7, -0.05, 3.0])
    def test_scalar_recurrence(self, g):
        cfg = TrainConfig()
        p = {"w": np.array(0.4)}
        state = TrainState.zeros_like(p)
        for _ in range(25):
            p, state = optimizer_step(p, {"w": np.array(g)}, state, 1e-2, cfg)
        assert float(p["w"]) == pytest.approx(scalar_reference(0.4, g, 25, 1e-2, cfg.weight_decay), rel=1e-13)
        assert state.step == 25

    def test_shape_mismatch(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(ValidationError):
            optimizer_step(p, {"w": np.zeros(3)}, TrainState.zeros_like(p), 0.1, TrainConfig())


class TestGradient:
    @pytest.mark.parametrize("hidden", [0, 3])
    def test_training_gradient(self, hidden):
        rng = np.random.default_rng(hidden)
        for _ in range(10):
            n, d = rng.integers(2, 21), rng.integers(1, 6)
            X = rng.normal(size=(n, d))
            y = rng.normal(size=n)
            params = init_params(d, TrainConfig(hidden_units=hidden, init_scale=0.5), rng)
            _, analytic = loss_and_grad(params, X, y, 0.5)
            numeric = finite_difference(params, X, y, 0.5)
            for k in params:
                np.testing.assert_allclose(analytic[k], numeric[k], rtol=1e-5, atol=1e-8)


def linear_problem(n=200, d=8, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 0.05, d)
    X, Xv = rng.normal(size=(n, d)), rng.normal(size=(60, d))
    return X, 0.85 + X @ w, Xv, 0.85 + Xv @ w


class TestTrain:
    def test_recovers_linear_model(self):
        X, y, Xv, yv = linear_problem()
        res = train(X, y, Xv, yv, TrainConfig(batch_size=16, max_epochs=300))
        assert res.best_r >= 0.999
        assert pearson_r(res.model.predict(Xv), yv) == res.best_r

    def test_frozen_parameters_stop_after_patience(self):
        X, y, Xv, yv = linear_problem(n=50)
        res = train(X, y, Xv, yv, TrainConfig(lr_max=0.0, lr_min=0.0, max_epochs=100))
        assert res.epochs_run == 15
        assert res.stopped_early

    def test_log_schema(self):
        X, y, Xv, yv = linear_problem(n=40)
        res = train(X, y, Xv, yv, TrainConfig(max_epochs=12))
        assert len(res.log) == res.epochs_run == 12
        lines = res.log_jsonl().splitlines()
        assert len(lines) == 12
        rec = json.loads(lines[0])
        assert set(rec) == {"epoch", "lr", "train_loss", "val_pearson_r", "best_so_far"}
        assert rec["lr"] == 5e-4

    def test_best_so_far_is_running_max(self):
        X, y, Xv, yv = linear_problem(n=40)
        res = train(X, y, Xv, yv, TrainConfig(max_epochs=40, batch_size=8))
        best = [r["best_so_far"] for r in res.log]
        assert all(a <= b for a, b in zip(best, best[1:]))
        assert res.best_r == best[-1]

    def test_deterministic(self):
        X, y, Xv, yv = linear_problem(n=60)
        cfg = TrainConfig(batch_size=7, max_epochs=30, seed=3)
        a, b = train(X, y, Xv, yv, cfg), train(X, y, Xv, yv, cfg)
        assert a.log == b.log
        np.testing.assert_array_equal(a.model.weights, b.model.weights)

    def test_hidden_layer(self):
        X, y, Xv, yv = linear_problem(n=120, d=4)
        res = train(X, y, Xv, yv, TrainConfig(hidden_units=6, batch_size=16, max_epochs=60))
        assert res.model.hidden_weights.shape == (4, 6)
        assert res.best_r > 0.9

    def test_constant_validation_targets(self):
        X, y, Xv, _ = linear_problem(n=30)
        with pytest.raises(ValidationError):
            train(X, y, Xv, np.ones(len(Xv)))

    def test_model_roundtrip(self):
        X, y, Xv, yv = linear_problem(n=30)
        model = train(X, y, Xv, yv, TrainConfig(max_epochs=3)).model
        back = LinearModel.from_dict(json.loads(json.dumps(model.to_dict())))
        np.testing.assert_array_equal(back.predict(Xv), model.predict(Xv))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(lr_min=1e-3, lr_max=1e-4)
        with pytest.raises(ValidationError):
            TrainConfig.from_dict({"bogus": 1})
