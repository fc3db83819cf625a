import math

import numpy as np
import pytest

from trajehr import autodiff as ad
from trajehr.errors import NonFiniteGradient
from trajehr.optim import AdamW


def make_param(value):
    return {"w": ad.parameter(np.asarray(value, dtype=np.float64))}


class TestAdamW:
    def test_zero_grads_zero_decay_fixed_point(self):
        params = make_param([1.0, -2.0, 3.0])
        opt = AdamW(params, lr=0.1, weight_decay=0.0)
        for _ in range(3):
            params["w"].grad = np.zeros(3)
            opt.step()
        np.testing.assert_array_equal(params["w"].data, [1.0, -2.0, 3.0])

    def test_none_grad_skipped(self):
        params = make_param([1.0])
        opt = AdamW(params, lr=0.1, weight_decay=0.5)
        opt.step()  # no grad set: parameter untouched, even by decay
        np.testing.assert_array_equal(params["w"].data, [1.0])

    def test_decay_only_multiplicative_shrink(self):
        params = make_param([2.0, -4.0])
        lr, wd = 0.05, 0.2
        opt = AdamW(params, lr=lr, weight_decay=wd)
        expected = np.array([2.0, -4.0])
        for _ in range(4):
            params["w"].grad = np.zeros(2)
            opt.step()
            expected = expected * (1.0 - lr * wd)
            np.testing.assert_allclose(params["w"].data, expected, rtol=1e-15)

    def test_three_steps_match_hand_unrolled_recurrence(self):
        # single scalar parameter, constant gradient g = 0.5
        lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
        theta = 1.0
        m = v = 0.0
        g = 0.5
        params = make_param([1.0])
        opt = AdamW(params, lr=lr, weight_decay=wd, betas=(b1, b2), eps=eps)
        for t in range(1, 4):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            theta = theta - lr * (mhat / (math.sqrt(vhat) + eps) + wd * theta)
            params["w"].grad = np.array([g])
            opt.step()
            np.testing.assert_allclose(params["w"].data[0], theta, rtol=1e-14)

    def test_grad_scale_used_for_accumulation_mean(self):
        a = make_param([1.0])
        b = make_param([1.0])
        opt_a = AdamW(a, lr=0.01, weight_decay=0.0)
        opt_b = AdamW(b, lr=0.01, weight_decay=0.0)
        a["w"].grad = np.array([4.0])
        opt_a.step(grad_scale=0.25)
        b["w"].grad = np.array([1.0])
        opt_b.step()
        np.testing.assert_allclose(a["w"].data, b["w"].data, rtol=1e-15)

    def test_non_finite_gradient_names_group(self):
        params = make_param([1.0])
        opt = AdamW(params, lr=0.1)
        params["w"].grad = np.array([np.nan])
        with pytest.raises(NonFiniteGradient, match="'w'"):
            opt.step()

    def test_grad_cleared_after_step(self):
        params = make_param([1.0])
        opt = AdamW(params, lr=0.1)
        params["w"].grad = np.array([1.0])
        opt.step()
        assert params["w"].grad is None

    def test_determinism(self):
        runs = []
        for _ in range(2):
            params = make_param(np.linspace(-1, 1, 7))
            opt = AdamW(params, lr=0.01, weight_decay=0.01)
            rng = np.random.default_rng(0)
            for _ in range(10):
                params["w"].grad = rng.normal(size=7)
                opt.step()
            runs.append(params["w"].data.copy())
        np.testing.assert_array_equal(runs[0], runs[1])
