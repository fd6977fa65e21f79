"""Central finite-difference checks for the autodiff engine."""

import numpy as np

from . import tensor as T


def numerical_grad(fn, tensors, step=1e-5):
    """Central differences of the scalar ``fn()`` w.r.t. each tensor's data.

    ``fn`` is re-evaluated with each element perturbed in place, so it must
    read the tensors' current data every call.
    """
    grads = []
    with T.no_grad():
        for t in tensors:
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = float(fn().data)
                flat[i] = orig - step
                down = float(fn().data)
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def analytic_grad(fn, tensors):
    return T.grad(fn(), tensors)


def relative_error(a, b, floor=1e-8):
    """Elementwise |a-b| / max(|a|, |b|, floor); max over all elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(fn, tensors, step=1e-5, floor=1e-8):
    """Max relative error between analytic and numerical gradients.

    All tensors must be float64 leaves with ``requires_grad`` set.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks run in float64")
    analytic = analytic_grad(fn, tensors)
    numeric = numerical_grad(fn, tensors, step=step)
    return max(relative_error(a, n, floor=floor) for a, n in zip(analytic, numeric))
