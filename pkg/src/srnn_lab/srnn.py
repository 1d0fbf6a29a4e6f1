"""Shuffling RNN cell: fixed circular-shift recurrence driven by a gated input network.

    h_t = act(shift(h_{t-1}, +1) + b(x_t)),   b(x) = f_r(x) * sigmoid(W_s x + b_s)
    o_t = readout(h_t)

Arrays are batched as ``(T, B, features)``. Token inputs are ``(T, B)`` integer
ids and go through an embedding lookup first.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .tensor import ShapeError, activation, activation_grad, circular_shift, rotate_steps, sigmoid

MAGIC = b"SRNN1"
HIDDEN_ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class AffineLayer:
    W: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __call__(self, x):
        out = x @ self.W.T
        out += self.bias
        return out

    @property
    def shape(self):
        return self.W.shape


@dataclass
class SrnnParams:
    f_r: list[AffineLayer]
    gate: AffineLayer | None
    readout: AffineLayer
    embedding: np.ndarray | None = None  # (vocab, d_e)
    activation: str = "relu"

    @property
    def d_h(self) -> int:
        return self.readout.W.shape[1]

    @property
    def d_i(self) -> int:
        """Width of the vector fed to the b network (post-embedding)."""
        return self.f_r[0].W.shape[1]

    @property
    def d_o(self) -> int:
        return self.readout.W.shape[0]

    @property
    def gating(self) -> bool:
        return self.gate is not None

    def arrays(self) -> dict[str, np.ndarray]:
        """Named views of every learnable array, in checkpoint order."""
        out = {}
        if self.embedding is not None:
            out["embedding"] = self.embedding
        for i, layer in enumerate(self.f_r):
            out[f"f_r.{i}.W"] = layer.W
            out[f"f_r.{i}.b"] = layer.bias
        if self.gate is not None:
            out["gate.W"] = self.gate.W
            out["gate.b"] = self.gate.bias
        out["readout.W"] = self.readout.W
        out["readout.b"] = self.readout.bias
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], activation: str = "relu") -> "SrnnParams":
        n_layers = sum(1 for k in arrays if k.startswith("f_r.") and k.endswith(".W"))
        f_r = [AffineLayer(arrays[f"f_r.{i}.W"], arrays[f"f_r.{i}.b"]) for i in range(n_layers)]
        gate = AffineLayer(arrays["gate.W"], arrays["gate.b"]) if "gate.W" in arrays else None
        params = cls(
            f_r=f_r,
            gate=gate,
            readout=AffineLayer(arrays["readout.W"], arrays["readout.b"]),
            embedding=arrays.get("embedding"),
            activation=activation,
        )
        validate(params)
        return params

    def astype(self, dtype) -> "SrnnParams":
        return SrnnParams.from_arrays(
            {k: v.astype(dtype) for k, v in self.arrays().items()}, self.activation
        )


@dataclass
class BCache:
    x: np.ndarray  # (..., d_i) inputs
    pre: list[np.ndarray]  # f_r pre-activations, one per layer; the last is f_r(x)
    gate: np.ndarray | None  # sigmoid output, (..., d_h)
    gate_pre: np.ndarray | None


@dataclass
class ForwardTrace:
    inputs: np.ndarray  # raw inputs as given
    x: np.ndarray  # (T, B, d_i) post-embedding
    b_cache: BCache  # arrays shaped (T, B, width)
    b: np.ndarray  # (T, B, d_h)
    z: np.ndarray  # (T, B, d_h)
    h: np.ndarray  # (T + 1, B, d_h); h[0] is the initial state
    outputs: np.ndarray = field(repr=False, default=None)

    @property
    def T(self) -> int:
        return self.z.shape[0]


def validate(params: SrnnParams) -> None:
    if params.activation not in HIDDEN_ACTIVATIONS:
        raise ValueError(f"activation must be one of {HIDDEN_ACTIVATIONS}, got {params.activation!r}")
    if not params.f_r:
        raise ShapeError("f_r needs at least one layer")
    width = params.d_i
    for i, layer in enumerate(params.f_r):
        if layer.W.shape[1] != width or layer.bias.shape != (layer.W.shape[0],):
            raise ShapeError(f"f_r layer {i} has shape {layer.W.shape}, expected input width {width}")
        width = layer.W.shape[0]
    if width != params.d_h:
        raise ShapeError(f"f_r output width {width} != d_h {params.d_h}")
    if params.gate is not None and params.gate.W.shape != (params.d_h, params.d_i):
        raise ShapeError(f"gate shape {params.gate.W.shape} != {(params.d_h, params.d_i)}")
    if params.embedding is not None and params.embedding.shape[1] != params.d_i:
        raise ShapeError(f"embedding width {params.embedding.shape[1]} != d_i {params.d_i}")


def init_params(
    d_i: int | None,
    d_h: int,
    d_o: int,
    hidden: list[int] | tuple[int, ...] = (8,),
    vocab: int | None = None,
    d_e: int | None = None,
    seed: int = 0,
    activation: str = "relu",
    gating: bool = True,
) -> SrnnParams:
    """He-initialised parameters (variance 2/fan_in, zero biases).

    With ``vocab`` and ``d_e`` the model takes token ids and ``d_i`` must be
    ``None`` or equal to ``d_e``.
    """
    if (vocab is None) != (d_e is None):
        raise ValueError("vocab and d_e must be given together")
    if vocab is not None:
        if d_i is not None and d_i != d_e:
            raise ValueError(f"d_i={d_i} conflicts with embedding width d_e={d_e}")
        d_i = d_e
    dims = [d_i, d_h, d_o, *hidden] + ([vocab] if vocab is not None else [])
    if any(d is None or d < 1 for d in dims):
        raise ValueError(f"all dimensions must be positive, got {dims}")
    rng = np.random.default_rng(seed)

    def he(n_out, n_in):
        return AffineLayer(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)), np.zeros(n_out))

    embedding = rng.normal(0.0, 1.0, size=(vocab, d_e)) if vocab is not None else None
    widths = [d_i, *hidden, d_h]
    f_r = [he(n_out, n_in) for n_in, n_out in zip(widths[:-1], widths[1:])]
    gate = he(d_h, d_i) if gating else None
    readout = he(d_o, d_h)
    params = SrnnParams(f_r=f_r, gate=gate, readout=readout, embedding=embedding, activation=activation)
    validate(params)
    return params


def param_count(params: SrnnParams) -> int:
    return sum(a.size for a in params.arrays().values())


def b_apply(params: SrnnParams, x: np.ndarray) -> tuple[np.ndarray, BCache]:
    """Gated input network applied along the last axis of ``x`` (shape ``(..., d_i)``).

    Leading axes are kept as a stack rather than flattened: numpy then issues one
    product per timestep slice, so evaluating all timesteps at once is bit-identical
    to evaluating them one at a time.
    """
    if x.shape[-1] != params.d_i:
        raise ShapeError(f"input width {x.shape[-1]} != d_i {params.d_i}")
    pre = []
    a = x
    for i, layer in enumerate(params.f_r):
        p = layer(a)
        pre.append(p)
        if i < len(params.f_r) - 1:
            a = np.maximum(p, 0.0)
    f = pre[-1]
    if params.gate is None:
        return f, BCache(x, pre, None, None)
    gate_pre = params.gate(x)
    gate = sigmoid(gate_pre)
    return f * gate, BCache(x, pre, gate, gate_pre)


def embed(params, inputs: np.ndarray) -> np.ndarray:
    """Map raw ``inputs`` to ``(T, B, d_i)`` vectors (embedding lookup for token ids)."""
    inputs = np.asarray(inputs)
    if params.embedding is not None:
        if inputs.ndim != 2 or not np.issubdtype(inputs.dtype, np.integer):
            raise ShapeError(f"token inputs must be integer (T, B), got {inputs.dtype} {inputs.shape}")
        vocab = params.embedding.shape[0]
        if inputs.size and (inputs.min() < 0 or inputs.max() >= vocab):
            raise ShapeError(f"token id out of range [0, {vocab})")
        return params.embedding[inputs]
    if inputs.ndim != 3:
        raise ShapeError(f"real inputs must be (T, B, d_i), got shape {inputs.shape}")
    return inputs.astype(params.readout.W.dtype, copy=False)


def initial_state(params, h0, batch: int, dtype) -> np.ndarray:
    if h0 is None:
        return np.zeros((batch, params.d_h), dtype=dtype)
    h0 = np.asarray(h0, dtype=dtype)
    if h0.shape[-1] != params.d_h:
        raise ShapeError(f"h0 width {h0.shape[-1]} != d_h {params.d_h}")
    return np.broadcast_to(h0, (batch, params.d_h))


def _stack_caches(caches: list[BCache]) -> BCache:
    has_gate = caches[0].gate is not None
    return BCache(
        x=np.stack([c.x for c in caches]),
        pre=[np.stack([c.pre[i] for c in caches]) for i in range(len(caches[0].pre))],
        gate=np.stack([c.gate for c in caches]) if has_gate else None,
        gate_pre=np.stack([c.gate_pre for c in caches]) if has_gate else None,
    )


def forward(params: SrnnParams, inputs, h0=None, precompute_b: bool = True) -> tuple[np.ndarray, ForwardTrace]:
    """Run the cell over a batch of sequences.

    Returns outputs of shape ``(T, B, d_o)`` and the trace needed by
    :func:`backward`. ``precompute_b`` evaluates the input network for every
    timestep in one pass before the recurrence; the alternative interleaves it.
    """
    x = embed(params, inputs)
    if x.shape[-1] != params.d_i:
        raise ShapeError(f"input width {x.shape[-1]} != d_i {params.d_i}")
    T, B, d_i = x.shape
    dtype = params.readout.W.dtype
    d_h = params.d_h

    kind = params.activation
    h0 = initial_state(params, h0, B, dtype)
    if precompute_b:
        b, cache = b_apply(params, x)
        # Elementwise ops commute with the shift, so run the recurrence on
        # g_t = shift(h_t, -t): g_{t+1} = act(g_t + shift(b_t, -(t+1))).
        zr = rotate_steps(b, 1, -1)
        g = np.empty((T + 1, B, d_h), dtype=dtype)
        g[0] = h0
        for t in range(T):
            zr[t] += g[t]
            g[t + 1] = activation(kind, zr[t])
        z = rotate_steps(zr, 1)
        h = rotate_steps(g, 0)
    else:
        b = np.empty((T, B, d_h), dtype=dtype)
        caches = []
        z = np.empty((T, B, d_h), dtype=dtype)
        h = np.empty((T + 1, B, d_h), dtype=dtype)
        h[0] = h0
        for t in range(T):
            b[t], c = b_apply(params, x[t])
            caches.append(c)
            circular_shift(h[t], 1, out=z[t])
            z[t] += b[t]
            h[t + 1] = activation(kind, z[t])
        cache = _stack_caches(caches)

    outputs = params.readout(h[1:])
    trace = ForwardTrace(inputs=np.asarray(inputs), x=x, b_cache=cache, b=b, z=z, h=h, outputs=outputs)
    return outputs, trace


def _b_backward(params: SrnnParams, cache: BCache, db: np.ndarray, grads: dict) -> np.ndarray:
    """Accumulate input-network gradients into ``grads``; return d(loss)/dx.

    ``db`` and every cache array are ``(T, B, width)``; weight gradients sum over both.
    Works on the flattened ``(T * B, width)`` view throughout.
    """

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    shape = cache.x.shape
    x = flat(cache.x)
    db = flat(db)
    if params.gate is not None:
        g = flat(cache.gate)
        f = flat(cache.pre[-1])
        delta = db * g
        dgate_pre = db * f
        dgate_pre *= g
        dgate_pre *= 1.0 - g
        grads["gate.W"] = dgate_pre.T @ x
        grads["gate.b"] = dgate_pre.sum(axis=0)
        dx = dgate_pre @ params.gate.W
    else:
        delta = db
        dx = np.zeros_like(x)
    for i in range(len(params.f_r) - 1, -1, -1):
        pre = flat(cache.pre[i - 1]) if i else None
        layer_in = x if i == 0 else np.maximum(pre, 0.0)
        grads[f"f_r.{i}.W"] = delta.T @ layer_in
        grads[f"f_r.{i}.b"] = delta.sum(axis=0)
        d_in = delta @ params.f_r[i].W
        if i == 0:
            dx += d_in
        else:
            delta = d_in * (pre > 0)
    return dx.reshape(shape)


def backward(params: SrnnParams, trace: ForwardTrace, output_grads, return_hidden: bool = False):
    """Exact gradients of a loss whose derivative w.r.t. each output is ``output_grads``.

    The adjoint of ``h_{t-1}`` is the inverse shift of ``act'(z_t) * adjoint(z_t)``.
    With ``return_hidden`` also returns ``dL/dh_t`` for t = 0..T as a
    ``(T + 1, B, d_h)`` array (index 0 is the initial state).
    """
    dO = np.asarray(output_grads)
    T, B, d_h = trace.z.shape
    if d_h != params.d_h or trace.x.shape[-1] != params.d_i:
        raise ShapeError(f"trace widths (d_i={trace.x.shape[-1]}, d_h={d_h}) do not match params")
    if dO.shape != (T, B, params.d_o):
        raise ShapeError(f"output_grads shape {dO.shape} != {(T, B, params.d_o)}")

    grads: dict[str, np.ndarray] = {}
    H = trace.h
    grads["readout.W"] = dO.reshape(T * B, -1).T @ H[1:].reshape(T * B, d_h)
    grads["readout.b"] = dO.sum(axis=(0, 1))
    dh_direct = dO @ params.readout.W

    # same de-rotated frame as forward: slice t holds shift(., -(t+1))
    slope = rotate_steps(activation_grad(params.activation, trace.z), 1, -1)
    dzr = rotate_steps(dh_direct, 1, -1)
    dhr = np.empty_like(dzr) if return_hidden else None
    carry = np.zeros((B, d_h), dtype=dzr.dtype)
    for t in range(T - 1, -1, -1):
        dzr[t] += carry
        if return_hidden:
            dhr[t] = dzr[t]
        dzr[t] *= slope[t]
        carry = dzr[t]
    dz = rotate_steps(dzr, 1)
    if return_hidden:
        dh_all = np.empty((T + 1, B, d_h), dtype=dz.dtype)
        dh_all[0] = carry
        dh_all[1:] = rotate_steps(dhr, 1)

    dx = _b_backward(params, trace.b_cache, dz, grads)
    if params.embedding is not None:
        demb = np.zeros_like(params.embedding)
        np.add.at(demb, trace.inputs.reshape(-1), dx.reshape(T * B, -1))
        grads["embedding"] = demb

    grads = {k: grads[k] for k in params.arrays()}
    if return_hidden:
        return grads, dh_all
    return grads


def save(params: SrnnParams, path, extra_meta: dict | None = None) -> None:
    meta = {"model": "srnn", "activation": params.activation, "gating": "on" if params.gating else "off"}
    meta.update(extra_meta or {})
    checkpoint.save(path, MAGIC, params.arrays(), meta)


def load(path) -> tuple[SrnnParams, dict]:
    magic, meta, arrays = checkpoint.load(path)
    if magic != MAGIC:
        raise checkpoint.CheckpointError(f"{path}: expected magic {MAGIC!r}, found {magic!r}")
    return SrnnParams.from_arrays(arrays, meta.get("activation", "relu")), meta
