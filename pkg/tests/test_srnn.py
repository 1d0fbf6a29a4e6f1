import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srnn_lab import srnn, tasks
from srnn_lab.checkpoint import CheckpointError
from srnn_lab.diagnostics import finite_diff_check
from srnn_lab.srnn import AffineLayer, SrnnParams
from srnn_lab.tensor import ShapeError, circular_shift


def hand_params(f_W, f_b, gate=None, R=None, c=None, activation="relu"):
    f_W = np.asarray(f_W, float)
    d_h = f_W.shape[0]
    R = np.ones((1, d_h)) if R is None else np.asarray(R, float)
    c = np.zeros(R.shape[0]) if c is None else np.asarray(c, float)
    g = None if gate is None else AffineLayer(np.asarray(gate[0], float), np.asarray(gate[1], float))
    return SrnnParams([AffineLayer(f_W, np.asarray(f_b, float))], g, AffineLayer(R, c), activation=activation)


def seq(*steps):
    return np.asarray(steps, float)[:, None, :]  # (T, 1, d)


class TestBApply:
    def test_hand_gated_identity(self):
        # f_r(x) = x and gate sigmoid(x): b = x * sigmoid(x)
        p = hand_params(np.eye(2), [0, 0], gate=(np.eye(2), [0, 0]))
        b, _ = srnn.b_apply(p, np.array([1.0, -2.0]))
        np.testing.assert_allclose(b, [0.7310585786, -0.2384058440], atol=1e-10)

    def test_zero_gate_halves(self):
        p = srnn.init_params(3, 5, 1, [4], seed=2)
        p.gate.W[:] = 0
        x = np.random.default_rng(0).normal(size=(6, 3))
        b, cache = srnn.b_apply(p, x)
        np.testing.assert_array_equal(b, 0.5 * cache.pre[-1])

    def test_no_gating_is_f_r(self):
        p = srnn.init_params(3, 5, 1, [4], seed=2, gating=False)
        x = np.random.default_rng(0).normal(size=(6, 3))
        b, _ = srnn.b_apply(p, x)
        h1 = np.maximum(x @ p.f_r[0].W.T + p.f_r[0].bias, 0)
        np.testing.assert_allclose(b, h1 @ p.f_r[1].W.T + p.f_r[1].bias, atol=1e-14)

    def test_width_mismatch(self):
        p = srnn.init_params(3, 5, 1, [4])
        with pytest.raises(ShapeError):
            srnn.b_apply(p, np.zeros(4))


class TestForward:
    def test_hand_two_steps(self):
        # b_1 = [1, 2, 3.5], h_1 = b_1; shift(h_1) = [2, 3.5, 1], b_2 = [-1, 0.5, 0], h_2 = [1, 4, 1]
        p = hand_params([[1, 0], [0, 1], [1, 1]], [0, 0, 0.5], R=[[1, 2, 3]], c=[0.1])
        out, trace = srnn.forward(p, seq([1, 2], [-1, 0.5]))
        np.testing.assert_allclose(trace.h[1, 0], [1, 2, 3.5])
        np.testing.assert_allclose(trace.h[2, 0], [1, 4, 1])
        np.testing.assert_allclose(out[:, 0, 0], [15.6, 12.1], atol=1e-12)

    def test_relu_clips_hand(self):
        p = hand_params([[1.0], [-1.0]], [0, 0])
        _, trace = srnn.forward(p, seq([2.0]))
        np.testing.assert_array_equal(trace.h[1, 0], [2.0, 0.0])

    def test_single_step_is_b(self):
        p = srnn.init_params(3, 6, 2, [4], seed=1, activation="identity")
        x = np.random.default_rng(1).normal(size=(1, 4, 3))
        out, trace = srnn.forward(p, x)
        b, _ = srnn.b_apply(p, x[0])
        np.testing.assert_array_equal(trace.h[1], b)
        np.testing.assert_array_equal(out[0], p.readout(b))

    def test_zero_b_is_pure_rotation(self):
        p = srnn.init_params(2, 7, 1, [3], seed=0, activation="identity")
        for layer in p.f_r:
            layer.W[:] = 0
        h0 = np.arange(7.0)
        _, trace = srnn.forward(p, np.ones((5, 1, 2)), h0=h0)
        np.testing.assert_array_equal(trace.h[-1, 0], circular_shift(h0, 5))

    def test_trace_h_is_activation_of_z(self):
        p = srnn.init_params(2, 8, 1, [4], seed=3, activation="tanh")
        _, trace = srnn.forward(p, np.random.default_rng(0).normal(size=(9, 3, 2)))
        np.testing.assert_array_equal(trace.h[1:], np.tanh(trace.z))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 6), st.integers(1, 40), st.integers(0, 1000))
    def test_precomputed_b_bit_identical(self, T, B, d_h, seed):
        p = srnn.init_params(None, d_h, 9, [8], vocab=10, d_e=6, seed=seed)
        inputs = np.random.default_rng(seed).integers(0, 10, size=(T, B))
        o1, t1 = srnn.forward(p, inputs, precompute_b=True)
        o2, t2 = srnn.forward(p, inputs, precompute_b=False)
        assert np.array_equal(o1, o2) and np.array_equal(t1.h, t2.h)

    def test_deterministic(self):
        p = srnn.init_params(2, 16, 1, [8], seed=5)
        x = np.random.default_rng(5).uniform(size=(20, 4, 2))
        a, ta = srnn.forward(p, x)
        b, tb = srnn.forward(p, x)
        assert np.array_equal(a, b) and np.array_equal(ta.z, tb.z)

    def test_input_width_mismatch(self):
        p = srnn.init_params(2, 4, 1, [3])
        with pytest.raises(ShapeError):
            srnn.forward(p, np.zeros((3, 1, 5)))

    def test_token_out_of_range(self):
        p = srnn.init_params(None, 4, 9, [3], vocab=10, d_e=4)
        with pytest.raises(ShapeError):
            srnn.forward(p, np.full((3, 1), 10))


def mlp_oracle(p, x, dout):
    """Gradients of sum(dout * o) for o = R act(f(x) * sigmoid(Gx + g)) + c, one sample at a time."""
    act = {"relu": lambda v: np.maximum(v, 0), "tanh": np.tanh, "identity": lambda v: v}[p.activation]
    dact = {"relu": lambda v: (v > 0).astype(float), "tanh": lambda v: 1 - np.tanh(v) ** 2,
            "identity": np.ones_like}[p.activation]
    n = len(p.f_r)
    g = {k: np.zeros_like(v) for k, v in p.arrays().items()}
    for xs, do in zip(x, dout):
        ins, pres = [], []
        a = xs
        for i, layer in enumerate(p.f_r):
            ins.append(a)
            z = layer.W @ a + layer.bias
            pres.append(z)
            a = np.maximum(z, 0) if i < n - 1 else z
        gp = p.gate.W @ xs + p.gate.bias
        s = 1 / (1 + np.exp(-gp))
        b = a * s
        h = act(b)
        g["readout.W"] += np.outer(do, h)
        g["readout.b"] += do
        db = (p.readout.W.T @ do) * dact(b)
        dgp = db * a * s * (1 - s)
        g["gate.W"] += np.outer(dgp, xs)
        g["gate.b"] += dgp
        delta = db * s
        for i in range(n - 1, -1, -1):
            g[f"f_r.{i}.W"] += np.outer(delta, ins[i])
            g[f"f_r.{i}.b"] += delta
            if i:
                delta = (p.f_r[i].W.T @ delta) * (pres[i - 1] > 0)
    return g


class TestBackward:
    @pytest.mark.parametrize("activation", ["relu", "tanh", "identity"])
    def test_single_step_matches_mlp_oracle(self, activation):
        p = srnn.init_params(3, 10, 2, [5, 4], seed=4, activation=activation)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 6, 3))
        dout = rng.normal(size=(1, 6, 2))
        _, trace = srnn.forward(p, x)
        got = srnn.backward(p, trace, dout)
        want = mlp_oracle(p, x[0], dout[0])
        for k in want:
            np.testing.assert_allclose(got[k], want[k], rtol=0, atol=1e-10, err_msg=k)

    def test_zero_output_grads(self):
        p = srnn.init_params(None, 8, 9, [4], vocab=10, d_e=4, seed=0)
        inputs = np.random.default_rng(0).integers(0, 10, size=(6, 2))
        out, trace = srnn.forward(p, inputs)
        for g in srnn.backward(p, trace, np.zeros_like(out)).values():
            assert not np.any(g)

    def test_grad_shapes_match_params(self):
        p = srnn.init_params(None, 8, 9, [4], vocab=10, d_e=4, seed=0)
        out, trace = srnn.forward(p, np.zeros((3, 2), dtype=int))
        grads = srnn.backward(p, trace, np.ones_like(out))
        assert {k: v.shape for k, v in grads.items()} == {k: v.shape for k, v in p.arrays().items()}

    def test_unused_embedding_rows_get_zero(self):
        p = srnn.init_params(None, 8, 9, [4], vocab=10, d_e=4, seed=0, activation="identity")
        p.f_r[0].bias[:] = 10.0  # keep the inner relu open so used rows get a signal
        inputs = np.array([[1, 2], [2, 1]])
        out, trace = srnn.forward(p, inputs)
        g = srnn.backward(p, trace, np.ones_like(out))["embedding"]
        assert not np.any(g[[0, 3, 4, 5, 6, 7, 8, 9]])
        assert np.any(g[1]) and np.any(g[2])

    def test_manual_central_differences(self):
        # a plain float64 difference quotient, independent of the diagnostics module
        p = srnn.init_params(2, 5, 1, [3], seed=8, activation="tanh")
        rng = np.random.default_rng(8)
        x = rng.normal(size=(7, 2, 2))
        w = rng.normal(size=(7, 2, 1))

        def loss():
            return float(np.sum(srnn.forward(p, x)[0] * w))

        _, trace = srnn.forward(p, x)
        grads = srnn.backward(p, trace, w)
        h = 1e-6
        for name, arr in p.arrays().items():
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss()
                arr[idx] = orig - h
                dn = loss()
                arr[idx] = orig
                assert abs((up - dn) / (2 * h) - grads[name][idx]) < 1e-7 * max(1, abs(grads[name][idx]))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences_memcopy(self, seed):
        p = srnn.init_params(None, 16, 9, [8], vocab=10, d_e=8, seed=seed)
        batch = tasks.gen_memcopy(10, 3, np.random.default_rng(seed))
        res = finite_diff_check("srnn", p, batch)
        assert res.max_rel_err < 1e-5
        assert res.skipped < 0.05 * srnn.param_count(p)

    def test_trace_mismatch(self):
        p = srnn.init_params(2, 4, 1, [3])
        q = srnn.init_params(2, 5, 1, [3])
        out, trace = srnn.forward(p, np.zeros((3, 1, 2)))
        with pytest.raises(ShapeError):
            srnn.backward(q, trace, out)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = srnn.init_params(2, 16, 1, [8], seed=9), srnn.init_params(2, 16, 1, [8], seed=9)
        for k in a.arrays():
            assert np.array_equal(a.arrays()[k], b.arrays()[k])

    def test_he_variance(self):
        p = srnn.init_params(512, 512, 1, [512], seed=0)
        var = p.f_r[1].W.var()
        assert abs(var - 2 / 512) < 0.2 * (2 / 512)

    def test_biases_zero(self):
        p = srnn.init_params(2, 16, 1, [8], seed=3)
        assert not any(np.any(v) for k, v in p.arrays().items() if k.endswith(".b"))

    def test_vocab_and_d_e_together(self):
        with pytest.raises(ValueError):
            srnn.init_params(None, 4, 1, [3], vocab=10)

    def test_non_positive_dims(self):
        with pytest.raises(ValueError):
            srnn.init_params(2, 0, 1, [3])


class TestParamCount:
    def test_one_hidden_layer_of_8(self):
        # 2*8+8 + 8*128+128 + 2*128+128 + 128*1+1
        assert srnn.param_count(srnn.init_params(2, 128, 1, [8])) == 1689

    def test_adding_configuration(self):
        assert srnn.param_count(srnn.init_params(2, 128, 1, [32])) == 96 + 4224 + 384 + 129

    def test_all_width_one(self):
        assert srnn.param_count(srnn.init_params(1, 1, 1, [1])) == 8

    def test_seed_invariant(self):
        assert srnn.param_count(srnn.init_params(3, 20, 2, [5], seed=1)) == \
            srnn.param_count(srnn.init_params(3, 20, 2, [5], seed=99))

    def test_embedding_counted(self):
        p = srnn.init_params(None, 4, 9, [3], vocab=10, d_e=2)
        assert srnn.param_count(p) == 20 + (2 * 3 + 3) + (3 * 4 + 4) + (2 * 4 + 4) + (4 * 9 + 9)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        p = srnn.init_params(None, 12, 9, [5, 3], vocab=10, d_e=4, seed=6, activation="tanh", gating=False)
        srnn.save(p, tmp_path / "c.bin", {"note": "x"})
        q, meta = srnn.load(tmp_path / "c.bin")
        assert meta["note"] == "x" and q.activation == "tanh" and not q.gating
        assert list(q.arrays()) == list(p.arrays())
        for k, v in p.arrays().items():
            assert v.tobytes() == q.arrays()[k].tobytes()

    def test_wrong_magic(self, tmp_path):
        from srnn_lab import baseline

        baseline.save(baseline.rnn_init(2, 4, 1), tmp_path / "v.bin")
        with pytest.raises(CheckpointError):
            srnn.load(tmp_path / "v.bin")
