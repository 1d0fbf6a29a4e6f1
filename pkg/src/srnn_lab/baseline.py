"""Vanilla RNN baseline: h_t = act(W1 h_{t-1} + W2 x_t + bias), o_t = readout(h_t).

Same trace/backward contract as :mod:`srnn_lab.srnn`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .srnn import AffineLayer, embed, initial_state
from .tensor import ShapeError, activation, activation_grad

MAGIC = b"VRNN1"


@dataclass
class VanillaParams:
    W1: np.ndarray  # (d_h, d_h)
    W2: np.ndarray  # (d_h, d_i)
    bias: np.ndarray  # (d_h,)
    readout: AffineLayer
    embedding: np.ndarray | None = None
    activation: str = "tanh"

    @property
    def d_h(self) -> int:
        return self.W1.shape[0]

    @property
    def d_i(self) -> int:
        return self.W2.shape[1]

    @property
    def d_o(self) -> int:
        return self.readout.W.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        if self.embedding is not None:
            out["embedding"] = self.embedding
        out.update({"W1": self.W1, "W2": self.W2, "bias": self.bias,
                    "readout.W": self.readout.W, "readout.b": self.readout.bias})
        return out

    @classmethod
    def from_arrays(cls, arrays, activation: str = "tanh") -> "VanillaParams":
        params = cls(
            W1=arrays["W1"], W2=arrays["W2"], bias=arrays["bias"],
            readout=AffineLayer(arrays["readout.W"], arrays["readout.b"]),
            embedding=arrays.get("embedding"), activation=activation,
        )
        validate(params)
        return params

    def astype(self, dtype) -> "VanillaParams":
        return VanillaParams.from_arrays({k: v.astype(dtype) for k, v in self.arrays().items()}, self.activation)


@dataclass
class VanillaTrace:
    inputs: np.ndarray
    x: np.ndarray  # (T, B, d_i)
    z: np.ndarray  # (T, B, d_h)
    h: np.ndarray  # (T + 1, B, d_h)
    outputs: np.ndarray

    @property
    def T(self) -> int:
        return self.z.shape[0]


def validate(params: VanillaParams) -> None:
    d_h = params.d_h
    if params.W1.shape != (d_h, d_h):
        raise ShapeError(f"W1 must be square, got {params.W1.shape}")
    if params.W2.shape[0] != d_h or params.bias.shape != (d_h,):
        raise ShapeError(f"W2 {params.W2.shape} / bias {params.bias.shape} do not match d_h={d_h}")
    if params.readout.W.shape[1] != d_h:
        raise ShapeError(f"readout input width {params.readout.W.shape[1]} != d_h {d_h}")
    if params.embedding is not None and params.embedding.shape[1] != params.d_i:
        raise ShapeError(f"embedding width {params.embedding.shape[1]} != d_i {params.d_i}")
    if params.activation not in ("tanh", "relu", "identity"):
        raise ValueError(f"unsupported activation {params.activation!r}")


def rnn_init(d_i: int | None, d_h: int, d_o: int, seed: int = 0, vocab: int | None = None,
             d_e: int | None = None, activation: str = "tanh") -> VanillaParams:
    """Glorot-normal weights (variance 2/(fan_in + fan_out)), zero biases."""
    if (vocab is None) != (d_e is None):
        raise ValueError("vocab and d_e must be given together")
    if vocab is not None:
        if d_i is not None and d_i != d_e:
            raise ValueError(f"d_i={d_i} conflicts with embedding width d_e={d_e}")
        d_i = d_e
    dims = [d_i, d_h, d_o] + ([vocab] if vocab is not None else [])
    if any(d is None or d < 1 for d in dims):
        raise ValueError(f"all dimensions must be positive, got {dims}")
    rng = np.random.default_rng(seed)

    def glorot(n_out, n_in):
        return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_out, n_in))

    embedding = rng.normal(0.0, 1.0, size=(vocab, d_e)) if vocab is not None else None
    params = VanillaParams(
        W1=glorot(d_h, d_h), W2=glorot(d_h, d_i), bias=np.zeros(d_h),
        readout=AffineLayer(glorot(d_o, d_h), np.zeros(d_o)),
        embedding=embedding, activation=activation,
    )
    validate(params)
    return params


def param_count(params: VanillaParams) -> int:
    return sum(a.size for a in params.arrays().values())


def rnn_forward(params: VanillaParams, inputs, h0=None) -> tuple[np.ndarray, VanillaTrace]:
    x = embed(params, inputs)
    if x.shape[-1] != params.d_i:
        raise ShapeError(f"input width {x.shape[-1]} != d_i {params.d_i}")
    T, B, _ = x.shape
    dtype = params.W1.dtype
    u = x @ params.W2.T + params.bias
    z = np.empty((T, B, params.d_h), dtype=dtype)
    h = np.empty((T + 1, B, params.d_h), dtype=dtype)
    h[0] = initial_state(params, h0, B, dtype)
    W1T = params.W1.T
    for t in range(T):
        z[t] = h[t] @ W1T + u[t]
        h[t + 1] = activation(params.activation, z[t])
    outputs = params.readout(h[1:])
    return outputs, VanillaTrace(np.asarray(inputs), x, z, h, outputs)


def rnn_backward(params: VanillaParams, trace: VanillaTrace, output_grads, return_hidden: bool = False):
    dO = np.asarray(output_grads)
    T, B, d_h = trace.z.shape
    if d_h != params.d_h or trace.x.shape[-1] != params.d_i:
        raise ShapeError("trace does not match params")
    if dO.shape != (T, B, params.d_o):
        raise ShapeError(f"output_grads shape {dO.shape} != {(T, B, params.d_o)}")
    H = trace.h
    grads = {
        "readout.W": dO.reshape(T * B, -1).T @ H[1:].reshape(T * B, d_h),
        "readout.b": dO.sum(axis=(0, 1)),
    }
    dh_direct = dO @ params.readout.W
    dz = np.empty_like(trace.z)
    dh_all = np.empty((T + 1, B, d_h), dtype=dz.dtype) if return_hidden else None
    carry = np.zeros((B, d_h), dtype=dz.dtype)
    for t in range(T - 1, -1, -1):
        dh = dh_direct[t] + carry
        if return_hidden:
            dh_all[t + 1] = dh
        dz[t] = dh * activation_grad(params.activation, trace.z[t])
        carry = dz[t] @ params.W1
    if return_hidden:
        dh_all[0] = carry

    dz_flat = dz.reshape(T * B, d_h)
    grads["W1"] = dz_flat.T @ H[:-1].reshape(T * B, d_h)
    grads["W2"] = dz_flat.T @ trace.x.reshape(T * B, -1)
    grads["bias"] = dz_flat.sum(axis=0)
    if params.embedding is not None:
        demb = np.zeros_like(params.embedding)
        np.add.at(demb, trace.inputs.reshape(-1), dz_flat @ params.W2)
        grads["embedding"] = demb
    grads = {k: grads[k] for k in params.arrays()}
    if return_hidden:
        return grads, dh_all
    return grads


# uniform names shared with the srnn module
init_params = rnn_init
forward = rnn_forward
backward = rnn_backward


def save(params: VanillaParams, path, extra_meta: dict | None = None) -> None:
    meta = {"model": "rnn", "activation": params.activation}
    meta.update(extra_meta or {})
    checkpoint.save(path, MAGIC, params.arrays(), meta)


def load(path) -> tuple[VanillaParams, dict]:
    magic, meta, arrays = checkpoint.load(path)
    if magic != MAGIC:
        raise checkpoint.CheckpointError(f"{path}: expected magic {MAGIC!r}, found {magic!r}")
    return VanillaParams.from_arrays(arrays, meta.get("activation", "tanh")), meta
