"""Adam: bias-corrected updates, determinism, partition invariance."""

import numpy as np
import pytest

from csilocal.model import ModelPartParams
from csilocal.optim import AdamConfig, OptimizerError, adam_init, adam_step
from csilocal.tensor import Tensor

from conftest import build_f64_model


def make_params(arrays: dict) -> ModelPartParams:
    return ModelPartParams("test", {k: Tensor(v, requires_grad=True, dtype=np.float64)
                                    for k, v in arrays.items()})


def scalar_adam_reference(grad_seq, theta0, eta, b1, b2, eps):
    """Pure-python Adam on one scalar parameter."""
    theta, m, v = theta0, 0.0, 0.0
    out = []
    for t, g in enumerate(grad_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - eta * mhat / (np.sqrt(vhat) + eps)
        out.append(theta)
    return out


class TestConfig:
    def test_defaults_match_experiment_setup(self):
        cfg = AdamConfig()
        assert cfg.learning_rate == 8e-5
        assert (cfg.beta1, cfg.beta2) == (0.9, 0.95)

    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": 0.0}, {"learning_rate": -1.0},
        {"beta1": 1.0}, {"beta2": -0.1}, {"eps": 0.0},
    ])
    def test_invalid_config_rejected(self, kwargs):
        with pytest.raises(OptimizerError):
            AdamConfig(**kwargs)


class TestState:
    def test_moments_zero_after_init(self, rng):
        params = make_params({"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(3)})
        state = adam_init(params, AdamConfig())
        assert state.step == 0
        assert all(np.all(m == 0) for m in state.m.values())
        assert all(np.all(v == 0) for v in state.v.values())

    def test_state_shapes_mirror_full_model(self):
        m = build_f64_model(n=4, c=8)
        for part in (m.encoder, m.tail, m.head):
            state = adam_init(part.params, AdamConfig())
            for name, t in part.params.items():
                assert state.m[name].shape == t.shape
                assert state.v[name].shape == t.shape


class TestStep:
    def test_zero_gradient_leaves_params_unchanged(self, rng):
        params = make_params({"w": rng.standard_normal((3, 2))})
        before = params.tensors["w"].data.copy()
        state = adam_init(params, AdamConfig())
        adam_step(params, {"w": np.zeros((3, 2))}, state, AdamConfig())
        assert np.array_equal(params.tensors["w"].data, before)
        assert state.step == 1

    def test_first_step_is_signed_learning_rate(self):
        cfg = AdamConfig(learning_rate=1e-2)
        params = make_params({"w": np.array([1.0])})
        state = adam_init(params, cfg)
        adam_step(params, {"w": np.array([0.5])}, state, cfg)
        # bias correction makes the first update -eta * g / (|g| + eps)
        expect = 1.0 - 1e-2 * 0.5 / (0.5 + cfg.eps)
        assert abs(params.tensors["w"].data[0] - expect) < 1e-12

    def test_quadratic_descent_matches_scalar_reference(self):
        cfg = AdamConfig(learning_rate=0.05, beta1=0.9, beta2=0.95)
        params = make_params({"t": np.array([1.0])})
        state = adam_init(params, cfg)
        theta_path, grads = [], []
        theta = 1.0
        for _ in range(50):
            g = 2.0 * params.tensors["t"].data[0]
            grads.append(float(g))
            adam_step(params, {"t": np.array([g])}, state, cfg)
            theta_path.append(float(params.tensors["t"].data[0]))
        ref = scalar_adam_reference(grads, 1.0, 0.05, 0.9, 0.95, cfg.eps)
        assert np.allclose(theta_path, ref, rtol=1e-12)
        mags = [1.0] + [abs(t) for t in theta_path]
        assert all(mags[i + 1] < mags[i] for i in range(1, 15))

    def test_partition_invariance(self, rng):
        cfg = AdamConfig(learning_rate=1e-3)
        a = rng.standard_normal(4)
        b = rng.standard_normal(3)
        c = rng.standard_normal(5)
        ga, gb, gc = rng.standard_normal(4), rng.standard_normal(3), rng.standard_normal(5)

        split = [make_params({"x": v.copy()}) for v in (a, b, c)]
        split_states = [adam_init(p, cfg) for p in split]
        for p, s, g in zip(split, split_states, (ga, gb, gc)):
            adam_step(p, {"x": g}, s, cfg)

        joint = make_params({"x": np.concatenate([a, b, c])})
        joint_state = adam_init(joint, cfg)
        adam_step(joint, {"x": np.concatenate([ga, gb, gc])}, joint_state, cfg)

        stacked = np.concatenate([p.tensors["x"].data for p in split])
        assert np.array_equal(stacked, joint.tensors["x"].data)

    def test_bit_identical_for_identical_inputs(self, rng):
        cfg = AdamConfig()
        results = []
        for _ in range(2):
            params = make_params({"w": np.arange(6.0).reshape(2, 3)})
            state = adam_init(params, cfg)
            for step in range(3):
                adam_step(params, {"w": np.full((2, 3), 0.1 * (step + 1))}, state, cfg)
            results.append(params.tensors["w"].data.copy())
        assert np.array_equal(results[0], results[1])

    def test_non_finite_gradient_aborts_whole_update(self, rng):
        params = make_params({"a": rng.standard_normal(3), "b": rng.standard_normal(2)})
        before = {k: t.data.copy() for k, t in params.items()}
        state = adam_init(params, AdamConfig())
        bad = {"a": np.ones(3), "b": np.array([1.0, np.nan])}
        with pytest.raises(OptimizerError, match="non-finite.*'b'"):
            adam_step(params, bad, state, AdamConfig())
        assert state.step == 0
        for k, t in params.items():
            assert np.array_equal(t.data, before[k])

    def test_missing_gradient_named(self, rng):
        params = make_params({"w": rng.standard_normal(3)})
        state = adam_init(params, AdamConfig())
        with pytest.raises(OptimizerError, match="'w'"):
            adam_step(params, {}, state, AdamConfig())

    def test_shape_mismatch_rejected(self, rng):
        params = make_params({"w": rng.standard_normal(3)})
        state = adam_init(params, AdamConfig())
        with pytest.raises(OptimizerError):
            adam_step(params, {"w": np.zeros(4)}, state, AdamConfig())
