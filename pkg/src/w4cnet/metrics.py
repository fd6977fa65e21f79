"""Per-variable losses and evaluation metrics.

temperature          masked MSE (missing pixels excluded)
crr_intensity        plain MSE
asii_turb_trop_prob  MSE after a truncated, normalized logit transform
cma                  MSE after rounding predictions at 0.5 (evaluation only)
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

KINDS = ("mse", "masked_mse", "logit_mse", "quantized_mse")
METRIC_KIND = {
    "temperature": "masked_mse",
    "crr_intensity": "mse",
    "asii_turb_trop_prob": "logit_mse",
    "cma": "quantized_mse",
}
# cma is trained on plain MSE and only selected on the rounded metric
TRAIN_KIND = {**METRIC_KIND, "cma": "mse"}


@dataclass(frozen=True)
class MetricSpec:
    variable: str
    kind: str
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if not 0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")

    @classmethod
    def for_variable(cls, variable, epsilon=1e-3, training=False):
        table = TRAIN_KIND if training else METRIC_KIND
        if variable not in table:
            raise ValueError(f"unknown target variable {variable!r}")
        return cls(variable, table[variable], epsilon)


def mse(pred, target):
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    return T.reduce_mean(T.square(T.sub(pred, target)))


def masked_mse(pred, target, mask):
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    return T.reduce_mean(T.square(T.sub(pred, target)), mask=mask)


def _logit(p):
    return math.log(p / (1 - p))


def logit_transform(x, epsilon=1e-3):
    """Clip to [eps, 1-eps], take log-odds, rescale so that 0 -> 0 and 1 -> 1."""
    if not 0 < epsilon < 0.5:
        raise ValueError(f"epsilon must lie in (0, 0.5), got {epsilon}")
    x = T.as_tensor(x)
    lo = _logit(epsilon)
    span = _logit(1 - epsilon) - lo
    c = T.clip(x, epsilon, 1 - epsilon)
    lg = T.sub(T.log(c), T.log(T.one_minus(c)))
    return T.mul(T.add(lg, -lo), 1.0 / span)


def logit_mse(pred, target, epsilon=1e-3):
    return mse(logit_transform(pred, epsilon), logit_transform(target, epsilon))


def quantized_mse(pred, target):
    """Fraction of pixels whose prediction, rounded half-up at 0.5, misses the binary target."""
    p = pred.data if isinstance(pred, T.Tensor) else np.asarray(pred)
    t = target.data if isinstance(target, T.Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise ValueError(f"quantized_mse: shape mismatch {p.shape} vs {t.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("quantized_mse: target must be binary")
    rounded = (p >= 0.5).astype(np.float64)
    return float(np.mean((rounded - t) ** 2))


def loss_tensor(spec, pred, target, mask=None):
    """Differentiable objective for ``spec``; quantized kinds are not allowed."""
    if spec.kind == "mse":
        return mse(pred, target)
    if spec.kind == "masked_mse":
        return masked_mse(pred, target, mask)
    if spec.kind == "logit_mse":
        return logit_mse(pred, target, spec.epsilon)
    raise ValueError(f"{spec.kind} is evaluation-only and has no gradient")


def metric_value(spec, pred, target, mask=None):
    """Scalar metric of one prediction/target pair as a Python float."""
    if spec.kind == "quantized_mse":
        return quantized_mse(pred, target)
    with T.no_grad():
        pred = T.as_tensor(np.asarray(pred.data if isinstance(pred, T.Tensor) else pred, dtype=np.float64))
        target = T.as_tensor(np.asarray(target.data if isinstance(target, T.Tensor) else target, dtype=np.float64))
        return float(loss_tensor(spec, pred, target, mask).data)


def evaluate_predictions(spec, preds, targets, masks=None):
    """Average of the per-window metric over aligned prediction/target windows."""
    if len(preds) == 0:
        raise ValueError("evaluation set is empty")
    masks = masks if masks is not None else [None] * len(preds)
    values = []
    for p, t, m in zip(preds, targets, masks):
        if spec.kind == "masked_mse":
            if m is None:
                m = np.ones(np.shape(t), dtype=np.uint8)
            elif not np.any(m):
                continue  # nothing observed in this window
        values.append(metric_value(spec, p, t, m))
    if not values:
        raise ValueError("no window has any valid target pixel")
    return float(np.mean(values))


def evaluate_model(model, windows, spec, batch_size=8):
    """Per-variable validation metric of ``model`` over ``windows``."""
    if not windows:
        raise ValueError("evaluation set is empty")
    preds = []
    with T.no_grad():
        for lo in range(0, len(windows), batch_size):
            chunk = windows[lo : lo + batch_size]
            out = model(np.stack([w.inputs for w in chunk]))
            preds.extend(out.data)
    return evaluate_predictions(
        spec, preds, [w.targets for w in windows], [w.target_mask for w in windows]
    )
