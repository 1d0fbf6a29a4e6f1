"""RMSProp and Adam operating in place on dicts of named float64 arrays."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    algo: str  # "rmsprop" or "adam"
    lr: float = 1e-3
    decay: float = 0.9  # rmsprop squared-gradient EMA rate
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    v: dict[str, np.ndarray] = field(default_factory=dict)  # second moment
    m: dict[str, np.ndarray] = field(default_factory=dict)  # first moment (adam)

    def __post_init__(self):
        if self.algo not in ("rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {self.algo!r}")


def _check(params, grads):
    if params.keys() != grads.keys():
        raise ValueError(f"parameter/gradient names differ: {sorted(params.keys() ^ grads.keys())}")
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {grads[k].shape}, parameter is {p.shape}")


def rmsprop_step(params: dict, grads: dict, state: OptimizerState) -> OptimizerState:
    """v <- d*v + (1-d)*g^2;  theta <- theta - lr*g/(sqrt(v)+eps). No momentum."""
    _check(params, grads)
    for k, p in params.items():
        g = grads[k]
        v = state.v.get(k)
        if v is None:
            v = state.v[k] = np.zeros_like(p)
        v *= state.decay
        v += (1.0 - state.decay) * g * g
        p -= state.lr * g / (np.sqrt(v) + state.eps)
    state.step += 1
    return state


def adam_step(params: dict, grads: dict, state: OptimizerState) -> OptimizerState:
    _check(params, grads)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def step(params: dict, grads: dict, state: OptimizerState) -> OptimizerState:
    if state.algo == "rmsprop":
        return rmsprop_step(params, grads, state)
    return adam_step(params, grads, state)


def global_grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_to(grads: dict, max_norm: float) -> dict:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
