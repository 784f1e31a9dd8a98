"""Baselines: reductions, closed-form local solutions, determinism."""

import math

import numpy as np
import pytest

from drfed.baselines import (
    BaselineConfig,
    fedavg_round,
    fedprox_round,
    local_sgd,
    run_baseline,
)
from drfed.feddr import Hyper, SamplingScheme, run_feddr
from drfed.numerics import (
    DivergenceError,
    Problem,
    QuadraticLoss,
    Regularizer,
    SoftmaxLoss,
)


def quad_users(centers, scale=1.0):
    return tuple(QuadraticLoss(np.atleast_1d(np.asarray(c, dtype=float)),
                               scale=scale) for c in centers)


class TestLocalSGD:
    def test_zero_epochs_keeps_start(self):
        model = QuadraticLoss(np.array([3.0]))
        out = local_sgd(model, np.array([1.0]), np.array([1.0]), 0.0, 0, 0.1,
                        32, np.random.default_rng(0))
        assert out[0] == 1.0

    def test_runs_to_anchored_minimizer(self):
        # surrogate minimizer (s a + mu x)/(s + mu), here (a + 3x)/4
        model = QuadraticLoss(np.array([2.0]))
        x = np.array([10.0])
        out = local_sgd(model, x, x, 3.0, 500, 0.1, 32,
                        np.random.default_rng(0))
        assert math.isclose(out[0], (2.0 + 3.0 * 10.0) / 4.0, rel_tol=1e-10)

    def test_large_mu_pins_to_anchor(self):
        model = QuadraticLoss(np.array([5.0]))
        x = np.array([0.0])
        mu = 1e4
        out = local_sgd(model, x, x, mu, 200, 1e-5, 32,
                        np.random.default_rng(0))
        bound = np.linalg.norm(model.grad(x)) / mu
        assert np.linalg.norm(out - x) <= bound + 1e-6

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_named(self):
        model = QuadraticLoss(np.array([0.0]), scale=4.0)
        with pytest.raises(DivergenceError, match="lr"):
            local_sgd(model, np.array([1.0]), np.array([1.0]), 0.0, 2000,
                      10.0, 32, np.random.default_rng(0))


class TestRounds:
    def test_identical_users_average_idempotent(self):
        users = quad_users([4.0, 4.0, 4.0])
        cfg = BaselineConfig(epochs=2, lr=0.1)
        x1, active = fedavg_round(np.array([0.0]), users, cfg,
                                  np.random.default_rng(0))
        solo = local_sgd(users[0], np.array([0.0]), np.array([0.0]), 0.0, 2,
                         0.1, 32, np.random.default_rng(0))
        assert active == [0, 1, 2]
        assert x1[0] == pytest.approx(solo[0], rel=1e-15)

    def test_mu_zero_is_fedavg_bitwise(self):
        rng = np.random.default_rng(3)
        users = tuple(SoftmaxLoss(rng.normal(size=(6, 2)),
                                  rng.integers(0, 3, 6), 3) for _ in range(2))
        ca = BaselineConfig(algorithm="fedavg", epochs=2, lr=0.05,
                            batch_size=2)
        cp = BaselineConfig(algorithm="fedprox", mu=0.0, epochs=2, lr=0.05,
                            batch_size=2)
        xa, _ = fedavg_round(np.zeros(6), users, ca, np.random.default_rng(5))
        xp, _ = fedprox_round(np.zeros(6), users, cp, np.random.default_rng(5))
        assert np.array_equal(xa, xp)

    def test_fedavg_round_rejects_mu(self):
        cfg = BaselineConfig(algorithm="fedprox", mu=0.5)
        with pytest.raises(ValueError, match="mu"):
            fedavg_round(np.zeros(1), quad_users([0.0]), cfg,
                         np.random.default_rng(0))

    def test_converges_to_common_minimizer(self):
        users = quad_users([np.array([1.0, -2.0])] * 3)
        cfg = BaselineConfig(epochs=5, lr=0.2)
        x = np.zeros(2)
        rng = np.random.default_rng(0)
        for _ in range(60):
            x, _ = fedavg_round(x, users, cfg, rng)
        assert np.allclose(x, [1.0, -2.0], atol=1e-8)


class TestConfig:
    def test_rejections(self):
        with pytest.raises(ValueError, match="baseline"):
            BaselineConfig(algorithm="scaffold")
        with pytest.raises(ValueError, match="proximal"):
            BaselineConfig(algorithm="fedavg", mu=0.1)
        with pytest.raises(ValueError, match="mu"):
            BaselineConfig(algorithm="fedprox", mu=-1.0)
        with pytest.raises(ValueError, match="lr"):
            BaselineConfig(lr=0.0)


class TestRunBaseline:
    def test_rejects_composite_problem(self):
        prob = Problem(users=quad_users([0.0]),
                       reg=Regularizer(kind="l1", weight=0.1))
        with pytest.raises(ValueError, match="regularizer"):
            run_baseline(prob, BaselineConfig(), rounds=1)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(1)
        prob = Problem(users=tuple(
            SoftmaxLoss(rng.normal(size=(8, 2)), rng.integers(0, 2, 8), 2)
            for _ in range(3)), reg=Regularizer())
        cfg = BaselineConfig(algorithm="fedprox", mu=0.1, epochs=2, lr=0.1,
                             batch_size=4,
                             sampling=SamplingScheme(kind="uniform", size=2))
        a = run_baseline(prob, cfg, rounds=5, seed=11)
        b = run_baseline(prob, cfg, rounds=5, seed=11)
        c = run_baseline(prob, cfg, rounds=5, seed=12)
        assert [r.objective for r in a.records] == [r.objective for r in b.records]
        assert [r.objective for r in a.records] != [r.objective for r in c.records]
        assert 0.0 <= a[0].train_acc <= 1.0

    def test_bytes_proportional_to_participation(self):
        prob = Problem(users=quad_users([[0.0, 1.0]] * 6), reg=Regularizer())
        full = run_baseline(prob, BaselineConfig(epochs=1, lr=0.1),
                            rounds=3, seed=0)
        third = run_baseline(
            prob, BaselineConfig(epochs=1, lr=0.1,
                                 sampling=SamplingScheme(kind="uniform",
                                                         size=2)),
            rounds=3, seed=0)
        assert full[-1].bytes == 3 * third[-1].bytes
        assert third[1].bytes == 2 * 2 * 2 * 8

    def test_agrees_with_dr_solver_on_iid_quadratics(self):
        # identical users make the minimizer unique and shared; every
        # algorithm must land on it
        center = np.array([0.7, -0.3])
        prob = Problem(users=quad_users([center] * 4), reg=Regularizer())
        base = run_baseline(prob, BaselineConfig(epochs=4, lr=0.2),
                            rounds=40, seed=0)
        dr = run_feddr(prob, Hyper(eta=0.3), rounds=40, seed=0,
                       full_state=True)
        x_dr = np.asarray(dr[-1].state["xbar"])
        cfg = BaselineConfig(epochs=4, lr=0.2)
        x = np.zeros(2)
        rng = np.random.default_rng(0)
        for _ in range(40):
            x, _ = fedavg_round(x, prob.users, cfg, rng)
        assert np.linalg.norm(x - x_dr) < 1e-4
        assert abs(base[-1].objective - dr[-1].objective) < 1e-8
