"""Optimizer tests: reductions to plain gradient descent / Adam, hand-unrolled
golden trajectories, the loss-feedback scalar's bounds, and L2 scoping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ircnn.errors import NumericsError
from ircnn.optim import (
    AdamConfig,
    EveConfig,
    OptimizerState,
    SgdConfig,
    adam_step,
    apply_l2,
    eve_step,
    sgd_nesterov_step,
)

# Golden values from hand unrolls on the scalar quadratic loss theta^2/2
# (gradient = theta), theta0 = 1:
# SGD lr=0.1, mu=0.9, decay=0:
#   v1=-0.1,    theta1 = 1 - 0.09 - 0.1       = 0.81
#   v2=-0.171,  theta2 = 0.81 - 0.1539 - 0.081 = 0.5751
#   v3=-0.21141,theta3 = 0.5751 - 0.190269 - 0.057510 = 0.327321
SGD_GOLDEN = [0.81, 0.5751, 0.327321]
# Adam lr=0.1, b1=0.9, b2=0.999, eps=1e-8 (spreadsheet unroll, frozen):
ADAM_GOLDEN_5 = [0.9000000009999999, 0.8004122297123379, 0.7015862745044147,
                 0.6039390626821075, 0.5079636619272204]


def one_param(value):
    return {"w": np.array([float(value)])}


class TestSgdNesterov:
    def test_reduces_to_vanilla_gd_bitwise(self, rng):
        cfg = SgdConfig(lr=0.05, momentum=0.0, decay=0.0)
        params = {"w": rng.standard_normal(7)}
        expected = params["w"].copy()
        state = OptimizerState()
        for _ in range(5):
            g = {"w": np.sin(params["w"])}
            expected = expected - 0.05 * np.sin(expected)
            sgd_nesterov_step(state, params, g, cfg)
        np.testing.assert_array_equal(params["w"], expected)

    def test_zero_grads_leave_params_fixed(self, rng):
        params = {"w": rng.standard_normal(4)}
        before = params["w"].copy()
        state = OptimizerState()
        sgd_nesterov_step(state, params, {"w": np.zeros(4)}, SgdConfig())
        np.testing.assert_array_equal(params["w"], before)

    def test_three_step_golden_trajectory(self):
        cfg = SgdConfig(lr=0.1, momentum=0.9, decay=0.0)
        params = one_param(1.0)
        state = OptimizerState()
        seen = []
        for _ in range(3):
            sgd_nesterov_step(state, params, {"w": params["w"].copy()}, cfg)
            seen.append(float(params["w"][0]))
        np.testing.assert_allclose(seen, SGD_GOLDEN, rtol=1e-12)

    def test_decay_schedule(self):
        cfg = SgdConfig(lr=1.0, momentum=0.0, decay=1.0)
        params = one_param(0.0)
        state = OptimizerState()
        lrs = [sgd_nesterov_step(state, params, {"w": np.zeros(1)}, cfg).lr
               for _ in range(3)]
        np.testing.assert_allclose(lrs, [1.0, 0.5, 1.0 / 3.0], rtol=1e-12)

    def test_nonfinite_gradient_names_parameter(self):
        with pytest.raises(NumericsError, match="stem.w"):
            sgd_nesterov_step(OptimizerState(), {"stem.w": np.zeros(2)},
                              {"stem.w": np.array([1.0, np.nan])}, SgdConfig())


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        cfg = AdamConfig(lr=0.01)
        params = one_param(5.0)
        adam_step(OptimizerState(), params, {"w": np.ones(1)}, cfg)
        assert float(params["w"][0]) == pytest.approx(5.0 - 0.01, abs=1e-9)

    def test_zero_gradient_forever_fixed(self, rng):
        params = {"w": rng.standard_normal(3)}
        before = params["w"].copy()
        state = OptimizerState()
        for _ in range(10):
            adam_step(state, params, {"w": np.zeros(3)}, AdamConfig())
        np.testing.assert_array_equal(params["w"], before)

    def test_five_step_trajectory_matches_oracle(self):
        cfg = AdamConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        params = one_param(1.0)
        state = OptimizerState()
        seen = []
        # independent scalar unroll, recomputed here
        theta, m, v = 1.0, 0.0, 0.0
        oracle = []
        for t in range(1, 6):
            g = theta
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta = theta - 0.1 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
            oracle.append(theta)
        for _ in range(5):
            adam_step(state, params, {"w": params["w"].copy()}, cfg)
            seen.append(float(params["w"][0]))
        np.testing.assert_allclose(seen, oracle, rtol=1e-12)
        np.testing.assert_allclose(seen, ADAM_GOLDEN_5, rtol=1e-12)


class TestEve:
    def quadratic_stream(self, n, rng):
        thetas = rng.standard_normal(4)
        return {"w": thetas}, n

    def test_beta3_one_gamma_zero_is_adam_bitwise(self, rng):
        eve_cfg = EveConfig(lr=1e-3, decay=0.0, beta1=0.9, beta2=0.999, beta3=1.0)
        adam_cfg = AdamConfig(lr=1e-3, beta1=0.9, beta2=0.999)
        p1 = {"w": rng.standard_normal(6)}
        p2 = {"w": p1["w"].copy()}
        s1, s2 = OptimizerState(), OptimizerState()
        rng2 = np.random.default_rng(5)
        for _ in range(100):
            g = rng2.standard_normal(6)
            loss = float(np.square(p1["w"]).sum())
            eve_step(s1, p1, {"w": g}, loss, eve_cfg)
            adam_step(s2, p2, {"w": g.copy()}, adam_cfg)
            np.testing.assert_array_equal(p1["w"], p2["w"])

    def test_constant_loss_decays_d_geometrically(self):
        cfg = EveConfig()
        params = one_param(0.0)
        state = OptimizerState()
        ds = []
        for _ in range(50):
            info = eve_step(state, params, {"w": np.zeros(1)}, 1.2345, cfg)
            ds.append(info.d)
        assert ds[0] == 1.0
        # d_t - k_lower shrinks by beta3 each step once the clip floors at k_lower
        for a, b in zip(ds[1:], ds[2:]):
            assert b - 0.1 == pytest.approx(0.9 * (a - 0.1), rel=1e-9)
        assert 0.1 < ds[-1] < 0.11

    def test_exploding_loss_pushes_d_toward_upper(self):
        cfg = EveConfig()
        params = one_param(0.0)
        state = OptimizerState()
        loss = 1.0
        info = None
        for _ in range(60):
            info = eve_step(state, params, {"w": np.zeros(1)}, loss, cfg)
            loss *= 50.0                      # relative change far above the cap
        assert info.d > 9.0
        assert info.lr == pytest.approx((cfg.lr / (1 + cfg.decay * (state.t - 1)))
                                        / info.d, rel=1e-12)

    @given(st.lists(st.floats(min_value=1e-6, max_value=1e6, allow_nan=False),
                    min_size=2, max_size=60))
    @settings(max_examples=50, deadline=None)
    def test_d_stays_in_bounds_on_adversarial_streams(self, losses):
        cfg = EveConfig()
        params = one_param(0.0)
        state = OptimizerState()
        for loss in losses:
            eve_step(state, params, {"w": np.zeros(1)}, loss, cfg)
            assert 0.1 <= state.d <= 10.0

    def test_nonfinite_loss_rejected(self):
        with pytest.raises(NumericsError):
            eve_step(OptimizerState(), one_param(0.0), {"w": np.zeros(1)},
                     float("nan"), EveConfig())


class TestApplyL2:
    def test_zero_strength_identity(self, rng):
        grads = {"a.w": rng.standard_normal(3)}
        out = apply_l2(grads, {"a.w": rng.standard_normal(3)}, 0.0, {"a.w"})
        assert out is grads

    def test_in_scope_kernel_penalized(self):
        grads = {"b0.a.rcl.w_f": np.zeros(2)}
        params = {"b0.a.rcl.w_f": np.ones(2)}
        out = apply_l2(grads, params, 0.002, {"b0.a.rcl.w_f"})
        np.testing.assert_allclose(out["b0.a.rcl.w_f"], 0.002)

    def test_out_of_scope_untouched(self, rng):
        g = rng.standard_normal(4)
        grads = {"stem.conv.w": g.copy(), "b0.a.rcl.w_f": np.zeros(2)}
        params = {"stem.conv.w": np.ones(4), "b0.a.rcl.w_f": np.ones(2)}
        out = apply_l2(grads, params, 0.002, {"b0.a.rcl.w_f"})
        np.testing.assert_array_equal(out["stem.conv.w"], g)


class TestDeterminism:
    def test_repeated_runs_identical(self, rng):
        def run():
            params = {"w": np.linspace(-1, 1, 8)}
            state = OptimizerState()
            cfg = EveConfig(lr=1e-2)
            stream = np.random.default_rng(3)
            for _ in range(25):
                g = stream.standard_normal(8)
                eve_step(state, params, {"w": g}, float(np.abs(g).sum()), cfg)
            return params["w"]
        np.testing.assert_array_equal(run(), run())
