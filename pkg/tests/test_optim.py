"""Schedule endpoints and AdamW update rules, including the scalar quadratic."""

import numpy as np
import pytest

from cftseg import Tensor
from cftseg.errors import ConfigError
import cftseg.optim as O
import cftseg.tensor as T


class TestPolyLr:
    def test_endpoints_exact(self):
        assert O.poly_lr(6e-5, 0, 500) == 6e-5
        assert O.poly_lr(6e-5, 500, 500) == 0.0

    def test_linear_midpoint(self):
        assert O.poly_lr(1e-3, 250, 500, power=1.0) == 0.5e-3

    def test_power_bends_the_curve(self):
        np.testing.assert_allclose(O.poly_lr(1.0, 250, 500, power=2.0), 0.25)
        assert O.poly_lr(1.0, 100, 500, power=0.5) == (0.8) ** 0.5

    def test_validation(self):
        with pytest.raises(ConfigError):
            O.poly_lr(0.0, 0, 10)
        with pytest.raises(ConfigError):
            O.poly_lr(1e-3, 0, 0)
        with pytest.raises(ValueError):
            O.poly_lr(1e-3, 11, 10)


class TestAdamWStep:
    def test_first_step_matches_hand_formula(self):
        param = np.array([1.0, -2.0])
        grad = np.array([0.3, -0.1])
        m = np.zeros(2)
        v = np.zeros(2)
        O.adamw_step(param, grad, m, v, step=1, lr=0.01)
        m_hat = grad  # (1-b1)g / (1-b1)
        v_hat = grad * grad
        want = np.array([1.0, -2.0]) - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_array_equal(param, want)

    def test_zero_grads_fresh_moments_leave_params_alone(self):
        param = np.array([0.5])
        m, v = np.zeros(1), np.zeros(1)
        O.adamw_step(param, np.zeros(1), m, v, step=1, lr=0.1)
        np.testing.assert_array_equal(param, [0.5])

    def test_zero_grads_with_decay_shrink_by_lr_wd(self):
        param = np.array([2.0])
        m, v = np.zeros(1), np.zeros(1)
        O.adamw_step(param, np.zeros(1), m, v, step=1, lr=0.1, weight_decay=0.05)
        np.testing.assert_allclose(param, [2.0 * (1.0 - 0.1 * 0.05)], rtol=1e-15)

    def test_moments_decay_under_zero_grads(self):
        m, v = np.array([1.0]), np.array([1.0])
        O.adamw_step(np.zeros(1), np.zeros(1), m, v, step=5, lr=0.0)
        np.testing.assert_allclose(m, [0.9])
        np.testing.assert_allclose(v, [0.999])

    def test_quadratic_converges_within_200_steps(self):
        x = np.array([1.0])
        m, v = np.zeros(1), np.zeros(1)
        for step in range(1, 201):
            O.adamw_step(x, 2.0 * x.copy(), m, v, step=step, lr=0.1)
        assert abs(x[0]) < 1e-3


class TestAdamWClass:
    @staticmethod
    def driver(seed=0):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.standard_normal(4), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        return {"a": a, "b": b}

    def test_matches_functional_core(self):
        params = self.driver()
        shadow = {k: p.data.copy() for k, p in params.items()}
        sm = {k: np.zeros(4) for k in params}
        sv = {k: np.zeros(4) for k in params}
        opt = O.AdamW(params, weight_decay=0.01)
        rng = np.random.default_rng(1)
        for step in range(1, 4):
            grads = {p: rng.standard_normal(4) for p in params.values()}
            opt.step(grads, lr=0.05)
            for k, p in params.items():
                O.adamw_step(shadow[k], grads[p], sm[k], sv[k], step,
                             lr=0.05, weight_decay=0.01)
                np.testing.assert_array_equal(p.data, shadow[k])

    def test_drives_a_loss_downhill(self):
        params = self.driver(seed=2)
        opt = O.AdamW(params)
        target = np.arange(4.0)

        def loss_value():
            diff = params["a"] + params["b"] - Tensor(target)
            return (diff * diff).sum()

        first = loss_value().item()
        for _ in range(50):
            loss = loss_value()
            opt.step(T.backward(loss, leaves=list(params.values())), lr=0.05)
        assert loss_value().item() < first * 0.05

    def test_state_arrays_round_trip(self):
        params = self.driver(seed=3)
        opt = O.AdamW(params)
        grads = {p: np.ones(4) for p in params.values()}
        opt.step(grads, lr=0.01)
        saved = {k: a.copy() for k, a in opt.state_arrays().items()}

        fresh = O.AdamW(self.driver(seed=3))
        fresh.load_state_arrays(saved, step_count=opt.step_count)
        np.testing.assert_array_equal(fresh.m["a"], opt.m["a"])
        np.testing.assert_array_equal(fresh.v["b"], opt.v["b"])
        assert fresh.step_count == 1
