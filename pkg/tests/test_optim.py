import logging

import numpy as np
import pytest

from selftrain import tensor as T
from selftrain.optim import Adam, lr_at


def make_param(values, decay=True, name="w"):
    return (name, T.Tensor(np.array(values, dtype=np.float64), requires_grad=True), decay)


class TestSchedule:
    def test_half_warmup(self):
        assert lr_at(5, lr_base=2.0, warmup_steps=10, total_steps=100) == pytest.approx(1.0)

    def test_peak_exactly_at_warmup(self):
        lr = lambda t: lr_at(t, 1.0, 10, 100)
        assert lr(10) == pytest.approx(1.0)
        assert lr(9) < lr(10) and lr(11) < lr(10)

    def test_zero_at_total_and_never_negative(self):
        assert lr_at(100, 1.0, 10, 100) == 0.0
        assert lr_at(150, 1.0, 10, 100) == 0.0

    def test_continuous(self):
        vals = [lr_at(t, 1.0, 10, 100) for t in range(0, 101)]
        diffs = np.abs(np.diff(vals))
        assert diffs.max() <= 0.11  # 1/10 warmup slope is the steepest segment

    def test_no_warmup(self):
        assert lr_at(1, 1.0, 0, 100) == pytest.approx(99 / 100)


class TestAdam:
    def test_zero_gradient_no_decay_leaves_params(self):
        name, p, _ = make_param([1.0, -2.0])
        opt = Adam([(name, p, True)], lr=0.1, weight_decay=0.0, warmup_steps=0, total_steps=10)
        p.grad = np.zeros_like(p.data)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_single_step_matches_hand_formula(self):
        # From m = v = 0, one step: m_hat = g, v_hat = g^2, so the update is
        # -lr_eff * g / (|g| + eps), evaluated here with plain python floats.
        g = np.array([0.3, -1.7, 0.0])
        name, p, _ = make_param([0.0, 0.0, 0.0])
        lr, eps = 0.01, 1e-8
        # warmup 1 / total 2 puts the first step exactly at the schedule peak
        opt = Adam([(name, p, True)], lr=lr, eps=eps, weight_decay=0.0, warmup_steps=1, total_steps=2)
        p.grad = g.copy()
        opt.step()
        expected = np.array([-lr * gi / (abs(gi) + eps) for gi in g])
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_grads_zeroed_after_step(self):
        name, p, _ = make_param([1.0])
        opt = Adam([(name, p, True)], lr=0.1, total_steps=5)
        p.grad = np.ones(1)
        opt.step()
        assert p.grad is None

    def test_coupled_weight_decay_pulls_toward_zero(self):
        name, p, _ = make_param([10.0])
        opt = Adam([(name, p, True)], lr=0.1, weight_decay=0.5, warmup_steps=0, total_steps=10)
        p.grad = np.zeros(1)
        opt.step()
        assert p.data[0] < 10.0

    def test_decay_flag_exempts_param(self):
        name, p, _ = make_param([10.0])
        opt = Adam([(name, p, False)], lr=0.1, weight_decay=0.5, warmup_steps=0, total_steps=10)
        p.grad = np.zeros(1)
        opt.step()
        assert p.data[0] == 10.0

    def test_step_beyond_total_clamps_and_warns(self, caplog):
        name, p, _ = make_param([1.0])
        opt = Adam([(name, p, True)], lr=0.1, weight_decay=0.0, warmup_steps=0, total_steps=1)
        p.grad = np.ones(1)
        opt.step()
        after_first = p.data.copy()
        with caplog.at_level(logging.WARNING):
            p.grad = np.ones(1)
            opt.step()
        np.testing.assert_array_equal(p.data, after_first)
        assert any("total_steps" in r.message for r in caplog.records)

    def test_two_runs_same_seed_identical_trajectory(self):
        def run():
            rng = np.random.default_rng(42)
            p = T.Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
            opt = Adam([("w", p, True)], lr=0.05, warmup_steps=2, total_steps=20)
            traj = []
            for _ in range(10):
                loss = T.mul(p, p).sum()
                T.backward(loss)
                opt.step()
                traj.append(p.data.copy())
            return np.stack(traj)

        np.testing.assert_array_equal(run(), run())
