import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from w4cnet import tensor as T
from w4cnet.metrics import (
    MetricSpec, evaluate_predictions, logit_mse, logit_transform, loss_tensor, masked_mse, metric_value,
    mse, quantized_mse,
)

ORACLE_TOL = 1e-12


# straight-loop oracles over flattened pixels

def loop_mse(p, t):
    p, t = p.ravel(), t.ravel()
    acc = 0.0
    for a, b in zip(p, t):
        acc += (a - b) ** 2
    return acc / len(p)


def loop_masked_mse(p, t, m):
    acc, n = 0.0, 0
    for a, b, k in zip(p.ravel(), t.ravel(), m.ravel()):
        if k:
            acc += (a - b) ** 2
            n += 1
    return acc / n


def loop_logit(x, eps):
    lo = math.log(eps / (1 - eps))
    hi = math.log((1 - eps) / eps)
    c = min(max(x, eps), 1 - eps)
    return (math.log(c / (1 - c)) - lo) / (hi - lo)


def loop_logit_mse(p, t, eps):
    acc = 0.0
    for a, b in zip(p.ravel(), t.ravel()):
        acc += (loop_logit(a, eps) - loop_logit(b, eps)) ** 2
    return acc / p.size


def count_misclassified(p, t):
    wrong = 0
    for a, b in zip(p.ravel(), t.ravel()):
        wrong += int((1 if a >= 0.5 else 0) != b)
    return wrong / p.size


def rel(a, b):
    # relative for values above 1, absolute below: metrics near 0 lose relative digits to cancellation
    return abs(a - b) / max(abs(b), 1.0)


def random_instances(n, seed=99):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        p = rng.random(shape)
        t = rng.random(shape)
        m = (rng.random(shape) > 0.4).astype(np.uint8)
        m.flat[rng.integers(m.size)] = 1
        yield p, t, m, (rng.random(shape) > 0.5).astype(np.float64)


def test_oracles_on_1000_instances():
    worst = 0.0
    for p, t, m, b in random_instances(1000):
        worst = max(
            worst,
            rel(float(mse(p, t).data), loop_mse(p, t)),
            rel(float(masked_mse(p, t, m).data), loop_masked_mse(p, t, m)),
            rel(float(logit_mse(p, t, 1e-3).data), loop_logit_mse(p, t, 1e-3)),
            abs(quantized_mse(p, b) - count_misclassified(p, b)),
        )
    assert worst < ORACLE_TOL


class TestExamples:
    def test_mse(self):
        assert float(mse(np.zeros(3), np.zeros(3)).data) == 0
        assert float(mse(np.array([0.0, 1.0]), np.array([1.0, 1.0])).data) == 0.5
        with pytest.raises(ValueError):
            mse(np.zeros(3), np.zeros(4))

    def test_masked(self, rng):
        p, t = rng.random((4, 4)), rng.random((4, 4))
        ones = np.ones((4, 4), np.uint8)
        assert float(masked_mse(p, t, ones).data) == pytest.approx(float(mse(p, t).data), rel=1e-15)
        m = (rng.random((4, 4)) > 0.5).astype(np.uint8)
        m[0, 0] = 1
        q = np.where(m == 1, t, p)
        assert float(masked_mse(q, t, m).data) == 0
        with pytest.raises(ValueError, match="undefined"):
            masked_mse(p, t, np.zeros((4, 4)))

    def test_logit_fixed_points(self):
        out = logit_transform(np.array([0.0, 0.5, 1.0, 1e-3, 1 - 1e-3])).data
        np.testing.assert_allclose(out, [0, 0.5, 1, 0, 1], atol=1e-15)
        with pytest.raises(ValueError):
            logit_transform(np.array([0.5]), 0.5)
        with pytest.raises(ValueError):
            logit_transform(np.array([0.5]), 0.0)

    def test_logit_mse_identity_and_order(self, rng):
        p = rng.random(50)
        assert float(logit_mse(p, p).data) == 0
        target = np.full(50, 0.5)
        errs = (logit_transform(p).data - 0.5) ** 2
        assert np.array_equal(np.argsort(errs, kind="stable"), np.argsort(np.abs(p - 0.5), kind="stable"))
        assert float(logit_mse(p, target).data) == pytest.approx(errs.mean(), rel=1e-14)

    def test_quantized(self):
        assert quantized_mse(np.array([0.49, 0.51]), np.array([0, 1])) == 0.0
        assert quantized_mse(np.array([0.51, 0.51]), np.array([0, 1])) == 0.5
        assert quantized_mse(np.array([0.5]), np.array([1])) == 0.0
        with pytest.raises(ValueError, match="binary"):
            quantized_mse(np.array([0.5]), np.array([0.3]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=30))
def test_logit_monotone(xs):
    xs = np.sort(np.array(xs))
    ys = logit_transform(xs).data
    assert np.all(np.diff(ys) >= 0)


def test_smaller_epsilon_steepens_near_endpoints():
    delta = 0.01
    slopes = []
    for eps in (0.009, 1e-3, 1e-4, 1e-6):
        lo, hi = logit_transform(np.array([0.0, delta]), eps).data
        top_lo, top_hi = logit_transform(np.array([1 - delta, 1.0]), eps).data
        assert (hi - lo) == pytest.approx(top_hi - top_lo, rel=1e-9)
        slopes.append((hi - lo) / delta)
    assert all(b > a for a, b in zip(slopes, slopes[1:]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masked_independent_of_masked_pixels(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random((3, 5)), rng.random((3, 5))
    m = (rng.random((3, 5)) > 0.5).astype(np.uint8)
    m[1, 2] = 1
    q = np.where(m == 1, p, rng.random((3, 5)) * 100)
    assert float(masked_mse(p, t, m).data) == float(masked_mse(q, t, m).data)


class TestSpecsAndEvaluation:
    def test_variable_table(self):
        assert MetricSpec.for_variable("temperature").kind == "masked_mse"
        assert MetricSpec.for_variable("crr_intensity").kind == "mse"
        assert MetricSpec.for_variable("asii_turb_trop_prob").kind == "logit_mse"
        assert MetricSpec.for_variable("cma").kind == "quantized_mse"
        assert MetricSpec.for_variable("cma", training=True).kind == "mse"
        with pytest.raises(ValueError):
            MetricSpec.for_variable("cloud_type")

    def test_quantized_has_no_loss(self):
        with pytest.raises(ValueError, match="evaluation-only"):
            loss_tensor(MetricSpec.for_variable("cma"), np.zeros(2), np.zeros(2))

    @pytest.mark.parametrize("variable", ["temperature", "crr_intensity", "asii_turb_trop_prob", "cma"])
    def test_perfect_prediction_scores_zero(self, rng, variable):
        spec = MetricSpec.for_variable(variable)
        targets = [(rng.random((3, 1, 4, 4)) > 0.5).astype(np.float64) for _ in range(3)]
        assert evaluate_predictions(spec, targets, targets) == 0.0

    def test_constant_half_on_balanced_binary(self):
        t = np.array([0.0, 1.0] * 8).reshape(1, 1, 4, 4)
        spec = MetricSpec.for_variable("cma")
        assert evaluate_predictions(spec, [np.full_like(t, 0.5)], [t]) == 0.5
        # 0.5 rounds up, so the constant model hits exactly the positive half
        assert metric_value(spec, np.full_like(t, 0.5), t) == count_misclassified(np.full_like(t, 0.5), t)

    def test_fully_masked_windows_are_skipped(self, rng):
        spec = MetricSpec.for_variable("temperature")
        p, t = rng.random((2, 4)), rng.random((2, 4))
        m = np.ones((2, 4), np.uint8)
        got = evaluate_predictions(spec, [p, p], [t, t], [m, np.zeros_like(m)])
        assert got == pytest.approx(loop_mse(p, t), rel=1e-13)
        with pytest.raises(ValueError):
            evaluate_predictions(spec, [p], [t], [np.zeros_like(m)])
        with pytest.raises(ValueError, match="empty"):
            evaluate_predictions(spec, [], [])

    def test_loss_gradient_flows(self, rng):
        p = T.Tensor(rng.random(5) * 0.9 + 0.05, requires_grad=True)
        spec = MetricSpec.for_variable("asii_turb_trop_prob")
        (g,) = T.grad(loss_tensor(spec, p, rng.random(5)), [p])
        assert np.all(g != 0)
