import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srnn_lab import optim
from srnn_lab.optim import OptimizerState


def one(v):
    return {"w": np.array([float(v)])}


class TestRmsprop:
    def test_zero_grad_no_change(self):
        p = {"w": np.array([1.0, -2.0])}
        optim.rmsprop_step(p, {"w": np.zeros(2)}, OptimizerState("rmsprop"))
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_closed_form(self):
        p = one(0.0)
        optim.rmsprop_step(p, one(1.0), OptimizerState("rmsprop", lr=1e-3))
        assert p["w"][0] == pytest.approx(-0.001 / (math.sqrt(0.1) + 1e-8), rel=1e-15)

    def test_constant_gradient_step_tends_to_lr(self):
        p, s = one(0.0), OptimizerState("rmsprop", lr=1e-3)
        prev = 0.0
        for _ in range(300):
            optim.rmsprop_step(p, one(2.5), s)
            delta, prev = prev - p["w"][0], p["w"][0]
        assert delta == pytest.approx(1e-3, rel=1e-8)

    def test_ema_state(self):
        s = OptimizerState("rmsprop")
        p = one(0.0)
        optim.rmsprop_step(p, one(2.0), s)
        optim.rmsprop_step(p, one(1.0), s)
        assert s.v["w"][0] == pytest.approx(0.9 * 0.4 + 0.1 * 1.0)
        assert s.step == 2


class TestAdam:
    def test_zero_grad_no_change(self):
        p = one(3.0)
        optim.adam_step(p, one(0.0), OptimizerState("adam"))
        assert p["w"][0] == 3.0

    @pytest.mark.parametrize("g", [1.0, 7.0, 1e-3])
    def test_first_step_is_lr(self, g):
        p = one(0.0)
        optim.adam_step(p, one(g), OptimizerState("adam", lr=1e-3))
        # m/c1 = g, sqrt(v/c2) = |g|
        assert p["w"][0] == pytest.approx(-1e-3 * g / (g + 1e-8), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-6), min_size=1, max_size=8))
    def test_first_step_sign(self, gs):
        g = np.array(gs)
        p = {"w": np.zeros_like(g)}
        optim.adam_step(p, {"w": g}, OptimizerState("adam"))
        np.testing.assert_array_equal(np.sign(p["w"]), -np.sign(g))


@pytest.mark.parametrize("algo", ["rmsprop", "adam"])
def test_quadratic_strictly_decreases(algo):
    # f(w) = (w - 3)^2 from w = 0
    p, s = one(0.0), OptimizerState(algo, lr=1e-2)
    losses = []
    for _ in range(100):
        w = p["w"][0]
        losses.append((w - 3) ** 2)
        optim.step(p, one(2 * (w - 3)), s)
    assert all(a > b for a, b in zip(losses, losses[1:]))


@pytest.mark.parametrize("algo", ["rmsprop", "adam"])
def test_deterministic(algo):
    rng = np.random.default_rng(0)
    grads = [{"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)} for _ in range(5)]
    runs = []
    for _ in range(2):
        p, s = {"a": np.ones((3, 2)), "b": np.zeros(4)}, OptimizerState(algo)
        for g in grads:
            optim.step(p, g, s)
        runs.append(p)
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k])


def test_shape_mismatch():
    with pytest.raises(ValueError):
        optim.rmsprop_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState("rmsprop"))
    with pytest.raises(ValueError):
        optim.adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, OptimizerState("adam"))


def test_unknown_algo():
    with pytest.raises(ValueError):
        OptimizerState("sgd")


class TestClip:
    def test_three_four_five(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert optim.global_grad_norm(g) == 5.0
        c = optim.clip_to(g, 1.0)
        np.testing.assert_allclose(c["a"], [0.6], rtol=1e-15)
        np.testing.assert_allclose(c["b"], [0.8], rtol=1e-15)

    def test_below_threshold_unchanged_bitwise(self):
        g = {"a": np.array([0.1, 0.2])}
        c = optim.clip_to(g, 1.0)
        assert c["a"].tobytes() == g["a"].tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 10))
    def test_clipped_norm(self, seed, max_norm):
        rng = np.random.default_rng(seed)
        g = {"a": rng.normal(size=(4, 3)) * 10, "b": rng.normal(size=5) * 10}
        c = optim.clip_to(g, max_norm)
        norm = optim.global_grad_norm(c)
        if optim.global_grad_norm(g) > max_norm:
            assert abs(norm - max_norm) <= 1e-12 * max(1.0, max_norm)
        else:
            assert norm <= max_norm

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            optim.clip_to({"a": np.ones(1)}, 0.0)
