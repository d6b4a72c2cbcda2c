import numpy as np
import pytest

from lowrank.optim import (
    IntegratorKind,
    OptimizerStates,
    adam,
    euler,
    one_step_integrate,
    reset_state,
)


class TestEuler:
    def test_zero_gradient(self):
        p = np.array([1.0, -2.0])
        out = one_step_integrate(p, np.zeros(2), euler(0.2))
        np.testing.assert_array_equal(out, p)

    def test_arithmetic(self):
        out = one_step_integrate(np.array([1.0]), np.array([0.5]), euler(0.2))
        assert out[0] == pytest.approx(0.9, abs=1e-15)

    def test_linearity_in_gradient(self):
        rng = np.random.default_rng(61)
        p = rng.standard_normal((3, 4))
        g = rng.standard_normal((3, 4))
        d1 = p - one_step_integrate(p, g, euler(0.1))
        d3 = p - one_step_integrate(p, 3.0 * g, euler(0.1))
        np.testing.assert_allclose(d3, 3.0 * d1, rtol=1e-12)


class TestAdam:
    def test_three_step_hand_unroll(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        g = 0.37
        # hand recurrence on a scalar parameter
        p_ref = 1.5
        m = v = 0.0
        for t in range(1, 4):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p_ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        states = OptimizerStates()
        p = np.array([1.5])
        for _ in range(3):
            p = one_step_integrate(p, np.array([g]), adam(), states, ("x",))
        assert abs(p[0] - p_ref) < 1e-12

    def test_step_magnitude_bounded(self):
        states = OptimizerStates()
        rng = np.random.default_rng(62)
        kind = adam(lr=1e-3)
        p = rng.standard_normal(6)
        for scale in (1e-8, 1.0, 1e6):
            g = rng.standard_normal(6) * scale
            out = one_step_integrate(p, g, kind, states, ("b", scale))
            assert np.abs(out - p).max() <= 10 * kind.lr

    def test_zero_gradient_fixed_point(self):
        states = OptimizerStates()
        p = np.array([[2.0, -1.0]])
        out = one_step_integrate(p, np.zeros_like(p), adam(), states, ("z",))
        np.testing.assert_array_equal(out, p)

    def test_deterministic(self):
        g = np.array([0.3, -0.7])
        p = np.array([1.0, 1.0])
        outs = []
        for _ in range(2):
            st = OptimizerStates()
            q = p.copy()
            for _ in range(5):
                q = one_step_integrate(q, g, adam(), st, ("d",))
            outs.append(q)
        assert np.array_equal(outs[0], outs[1])

    def test_reset_equals_fresh_state(self):
        states = OptimizerStates()
        g = np.array([1.0])
        p = np.array([0.5])
        one_step_integrate(p, g, adam(), states, ("r",))
        reset_state(states, ("r",))
        after_reset = one_step_integrate(p, g, adam(), states, ("r",))
        fresh = one_step_integrate(p, g, adam(), OptimizerStates(), ("r",))
        assert np.array_equal(after_reset, fresh)

    def test_reset_unknown_key_is_noop(self):
        states = OptimizerStates()
        reset_state(states, ("missing",))

    def test_shape_change_purges_state(self):
        states = OptimizerStates()
        one_step_integrate(np.ones(3), np.ones(3), adam(), states, ("s",))
        assert states.entries[("s",)].t == 1
        # same key, new shape: moments restart from zero
        out = one_step_integrate(np.ones(5), np.zeros(5), adam(), states, ("s",))
        np.testing.assert_array_equal(out, np.ones(5))
        assert states.entries[("s",)].t == 1


class TestValidation:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            one_step_integrate(np.zeros(2), np.zeros(3), euler(0.1))

    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError, match="layer3"):
            one_step_integrate(
                np.zeros(2), np.array([1.0, np.nan]), euler(0.1), None, "layer3"
            )

    def test_bad_hyperparameters(self):
        with pytest.raises(ValueError):
            IntegratorKind("euler", lr=-0.1)
        with pytest.raises(ValueError):
            IntegratorKind("adam", lr=1e-3, beta1=1.0)
        with pytest.raises(ValueError):
            IntegratorKind("momentum", lr=0.1)

    def test_with_lr_keeps_kind(self):
        k = adam(lr=1e-3).with_lr(5e-4)
        assert k.lr == 5e-4 and k.kind == "adam" and k.beta2 == 0.999
