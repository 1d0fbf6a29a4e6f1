"""Gradient checks, hidden-gradient profiles, de-rotated state dumps and dead-unit profiles."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import models, srnn
from .tasks import TaskBatch, batch_loss
from .tensor import circular_shift

# Denominator floor for the relative error; below it the comparison is absolute.
REL_ERR_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    max_rel_err: float
    skipped: int
    checked: int
    worst: str = ""

    def __iter__(self):
        # unpacks as (max_rel_err, skipped)
        return iter((self.max_rel_err, self.skipped))


def _relu_signs(params, trace) -> list[np.ndarray]:
    """Sign patterns of every relu pre-activation in a trace."""
    signs = []
    if params.activation == "relu":
        signs.append(trace.z > 0)
    cache = getattr(trace, "b_cache", None)
    if cache is not None:
        signs.extend(p > 0 for p in cache.pre[:-1])
    return signs


def _loss(module, params, batch):
    outputs, trace = module.forward(params, batch.inputs)
    loss, _ = batch_loss(outputs, batch)
    return loss, _relu_signs(params, trace)


def analytic_grads(params, batch: TaskBatch) -> dict[str, np.ndarray]:
    module = models.module_for(params)
    outputs, trace = module.forward(params, batch.inputs)
    _, dO = batch_loss(outputs, batch)
    return module.backward(params, trace, dO)


def finite_diff_check(
    model: str | None,
    params,
    batch: TaskBatch,
    eps: float = 1e-6,
    grads: dict | None = None,
    extended: bool = True,
) -> GradCheckResult:
    """Compare backprop gradients against central differences, entry by entry.

    The loss is re-evaluated in extended precision (``numpy.longdouble``) unless
    ``extended`` is False. A parameter is skipped when either perturbation flips
    the sign of any relu pre-activation, i.e. crosses a kink. ``grads`` may be
    supplied to check externally computed gradients.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    module = models.get(model) if model else models.module_for(params)
    if grads is None:
        grads = analytic_grads(params, batch)
    probe = params.astype(np.longdouble) if extended else params.astype(np.float64)
    _, base_signs = _loss(module, probe, batch)

    worst, worst_name, skipped, checked = 0.0, "", 0, 0
    for name, arr in probe.arrays().items():
        g = grads[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            lp, sp = _loss(module, probe, batch)
            arr[idx] = orig - eps
            lm, sm = _loss(module, probe, batch)
            arr[idx] = orig
            if not all(np.array_equal(a, b) for a, b in zip(sp + sm, base_signs + base_signs)):
                skipped += 1
                continue
            numeric = float((lp - lm) / (2 * eps))
            a = float(g[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERR_FLOOR)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}{list(idx)}"
    return GradCheckResult(worst, skipped, checked, worst_name)


def hidden_grad_profile(model: str | None, params, batch: TaskBatch) -> np.ndarray:
    """Norm of dL/dh_t for t = 1..T under a final-step-only loss."""
    if not (batch.loss_mask[-1] and batch.loss_mask.sum() == 1) or batch.loss_kind == "per_step_ce":
        raise ValueError("hidden_grad_profile needs a loss on the final step only")
    module = models.get(model) if model else models.module_for(params)
    outputs, trace = module.forward(params, batch.inputs)
    _, dO = batch_loss(outputs, batch)
    _, dh = module.backward(params, trace, dO, return_hidden=True)
    return np.sqrt(np.sum(dh[1:] ** 2, axis=(1, 2)))


def derotate_states(trace, sample: int = 0, include_initial: bool = False) -> np.ndarray:
    """Undo the accumulated shift so each row follows one logical channel.

    Returns ``(d_h, T)`` with column j holding ``shift(h_{j+1}, -(j+1))``; with
    ``include_initial`` the result is ``(d_h, T + 1)`` and column t holds
    ``shift(h_t, -t)`` starting from the unshifted initial state.
    """
    H = trace.h[:, sample, :]
    start = 0 if include_initial else 1
    cols = [circular_shift(H[t], -t) for t in range(start, H.shape[0])]
    return np.stack(cols, axis=1)


def write_states_csv(states: np.ndarray, path) -> None:
    """CSV with header ``unit,t0,t1,...`` and one row per hidden unit."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["unit"] + [f"t{j}" for j in range(states.shape[1])])
        for unit, row in enumerate(states):
            w.writerow([unit] + [repr(float(v)) for v in row])


def dead_unit_profile(params, batch: TaskBatch, cumulative: bool = False) -> np.ndarray:
    """Fraction of hidden units exactly at zero per timestep, averaged over the batch.

    A relu unit at zero can revive, so the plain per-step fraction need not grow.
    With ``cumulative`` the count follows logical channels (shift removed) and
    reports the fraction that has hit zero at least once by step t; such a
    channel has lost its gradient path back to the start, and this fraction
    is non-decreasing in t.
    """
    module = models.module_for(params)
    _, trace = module.forward(params, batch.inputs)
    if not cumulative:
        return (trace.h[1:] == 0).mean(axis=(1, 2))
    if module is not srnn:
        raise ValueError("the cumulative profile follows shifted channels; it needs a shuffling network")
    T = trace.h.shape[0] - 1
    frames = np.stack([circular_shift(trace.h[t], -t) for t in range(1, T + 1)]) == 0
    return np.logical_or.accumulate(frames, axis=0).mean(axis=(1, 2))
