"""Adam updates and the validation-driven learning-rate/early-stop schedule."""

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params, grads, state, names=None):
    """One bias-corrected Adam update, in place on ``params`` (numpy arrays).

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("adam_step: parameter, gradient and moment lists differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            label = names[i] if names else f"#{i}"
            raise ValueError(f"adam_step: gradient shape {g.shape} differs from parameter {label} {p.shape}")
        if not np.isfinite(g).all():
            label = names[i] if names else f"#{i}"
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {label}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm is None or total <= max_norm:
        return grads, total
    scale = max_norm / (total + 1e-12)
    return [g * g.dtype.type(scale) for g in grads], total


@dataclass
class SchedulerState:
    """Validation bookkeeping.

    One stale-epoch counter drives both rules: the learning rate is divided by
    ``decay_factor`` whenever the counter reaches a multiple of
    ``patience_decay`` and training stops once it reaches ``patience_stop``.
    Improvement means a strictly lower metric.
    """

    lr: float = 1e-3
    best_metric: float = math.inf
    epochs_since_improvement: int = 0
    stopped: bool = False
    improved: bool = False
    decay_factor: float = 5.0
    patience_decay: int = 3
    patience_stop: int = 10


def scheduler_update(state, epoch_metric):
    """Advance ``state`` by one epoch's validation metric (pure; returns a new state)."""
    if epoch_metric is None or math.isnan(epoch_metric):
        raise ValueError(f"scheduler_update: invalid metric {epoch_metric!r}")
    s = SchedulerState(**vars(state))
    if epoch_metric < s.best_metric:
        s.best_metric = float(epoch_metric)
        s.epochs_since_improvement = 0
        s.improved = True
        return s
    s.improved = False
    s.epochs_since_improvement += 1
    if s.epochs_since_improvement % s.patience_decay == 0:
        s.lr = s.lr / s.decay_factor
    if s.epochs_since_improvement >= s.patience_stop:
        s.stopped = True
    return s
