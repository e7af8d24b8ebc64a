import numpy as np
import pytest

from utils.config import TrainConfig
from utils.errors import NumericalError
from utils.optimizer import AdamState, adam_step
from utils.tensor_core import ModelParams


def single_param(value):
    params = ModelParams()
    params.add("theta", np.array(value, dtype=np.float64))
    return params


def hand_adam(theta, steps, lr, wd, betas=(0.9, 0.999), eps=1e-8):
    """Plain-loop reference on f(theta) = sum(theta ** 2)"""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t in range(1, steps + 1):
        g = 2 * theta
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        m_hat = m / (1 - betas[0] ** t)
        v_hat = v / (1 - betas[1] ** t)
        theta = theta * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta


class TestAdamStep:
    def test_first_step_moves_by_lr_against_gradient(self):
        params = single_param([1.0, -2.0, 3.0])
        params["theta"].grad = np.array([0.5, -4.0, 1e-3])
        cfg = TrainConfig(lr=1e-3, weight_decay=0.0)
        adam_step(params, AdamState(), cfg)
        delta = params["theta"].data - np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(delta, [-1e-3, 1e-3, -1e-3], rtol=1e-4)

    def test_zero_gradient_without_decay_is_a_no_op(self):
        params = single_param([0.7, -0.3])
        state = adam_step(params, AdamState(), TrainConfig(lr=1e-2, weight_decay=0.0))
        np.testing.assert_array_equal(params["theta"].data, [0.7, -0.3])
        np.testing.assert_array_equal(state.m["theta"], 0.0)
        np.testing.assert_array_equal(state.v["theta"], 0.0)

    def test_zero_gradient_with_decay_shrinks_exactly(self):
        theta = np.array([0.7, -0.3, 5.0])
        params = single_param(theta)
        cfg = TrainConfig(lr=1e-2, weight_decay=0.1)
        adam_step(params, AdamState(), cfg)
        np.testing.assert_array_equal(params["theta"].data, theta * (1 - 1e-2 * 0.1))

    def test_decay_is_decoupled_from_gradient_scale(self):
        a, b = single_param([2.0]), single_param([2.0])
        a["theta"].grad = np.array([1.0])
        b["theta"].grad = np.array([1000.0])
        cfg = TrainConfig(lr=1e-2, weight_decay=0.5)
        adam_step(a, AdamState(), cfg)
        adam_step(b, AdamState(), cfg)
        assert a["theta"].data[0] == pytest.approx(b["theta"].data[0], abs=1e-9)

    @pytest.mark.parametrize("wd", [0.0, 0.05])
    def test_quadratic_matches_hand_stepped_reference(self, wd):
        theta = np.array([1.5, -0.25, 0.0, 3.0])
        params = single_param(theta)
        cfg = TrainConfig(lr=0.1, weight_decay=wd)
        state = AdamState()
        for _ in range(5):
            params["theta"].grad = 2 * params["theta"].data
            adam_step(params, state, cfg)
        assert state.step == 5
        np.testing.assert_allclose(params["theta"].data, hand_adam(theta, 5, 0.1, wd), atol=1e-12)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_gradient_rejected(self, bad):
        params = single_param([1.0, 2.0])
        params["theta"].grad = np.array([0.1, bad])
        with pytest.raises(NumericalError, match="theta at epoch 7"):
            adam_step(params, AdamState(), TrainConfig(), epoch=7)
        np.testing.assert_array_equal(params["theta"].data, [1.0, 2.0])

    def test_rejected_step_leaves_state_untouched(self):
        params = single_param([1.0])
        params["theta"].grad = np.array([np.nan])
        state = AdamState()
        with pytest.raises(NumericalError):
            adam_step(params, state, TrainConfig())
        assert state.step == 0
        assert state.m == {}
