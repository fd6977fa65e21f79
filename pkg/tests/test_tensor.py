import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from w4cnet import tensor as T
from w4cnet.gradcheck import check_gradients

from conftest import leaf

SINGLE_OP_TOL = 1e-5


def weighted_sum(out, rng):
    # fixed random weights so every output element has a distinct sensitivity
    w = T.Tensor(rng.normal(size=out.shape))
    return T.sum_all(out * w)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = T.Tensor(rng.random((1, 1, 3, 3)))
        out = T.conv2d(x, T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_identity_3x3_kernel(self, rng):
        x = T.Tensor(rng.random((2, 3, 6, 6)))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        np.testing.assert_array_equal(T.conv2d(x, T.Tensor(k)).data, x.data)

    def test_stride2_halves(self):
        x = T.Tensor(np.zeros((1, 1, 256, 256), dtype=np.float32))
        w = T.Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32))
        assert T.conv2d(x, w, stride=2, padding=1).shape == (1, 1, 128, 128)

    @pytest.mark.parametrize("h,w,k,s", [(5, 5, 3, 1), (5, 5, 3, 2), (6, 7, 5, 2), (4, 4, 1, 2)])
    def test_output_size_formula(self, h, w, k, s):
        x = T.Tensor(np.zeros((1, 2, h, w)))
        ker = T.Tensor(np.zeros((3, 2, k, k)))
        p = (k - 1) // 2
        out = T.conv2d(x, ker, stride=s)
        assert out.shape == (1, 3, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def test_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for s in (1, 2):
            out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=s).data
            ho, wo = out.shape[2:]
            ref = np.zeros_like(out)
            for n in range(2):
                for o in range(4):
                    for i in range(ho):
                        for j in range(wo):
                            patch = xp[n, :, i * s : i * s + 3, j * s : j * s + 3]
                            ref[n, o, i, j] = np.sum(patch * w[o]) + b[o]
            np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, rng, stride):
        x, w, b = leaf(rng, 2, 3, 5, 5), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
        fn = lambda: weighted_sum(T.conv2d(x, w, b, stride=stride), np.random.default_rng(0))
        assert check_gradients(fn, [x, w, b]) < SINGLE_OP_TOL

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError, match="odd"):
            T.conv2d(T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 2, 2))))

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))

    def test_rejects_non_same_padding(self):
        with pytest.raises(ValueError, match="padding"):
            T.conv2d(T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 3, 3))), padding=0)

    def test_chunked_path_matches(self, rng, monkeypatch):
        x, w, b = leaf(rng, 5, 2, 6, 6), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
        g = rng.normal(size=(5, 3, 6, 6))
        full = T.conv2d(x, w, b)
        ref = T.grad(T.sum_all(full * T.Tensor(g)), [x, w, b])
        monkeypatch.setattr(T, "_COL_BYTES", 1)
        chunked = T.conv2d(x, w, b)
        got = T.grad(T.sum_all(chunked * T.Tensor(g)), [x, w, b])
        np.testing.assert_allclose(chunked.data, full.data, rtol=1e-13)
        for a, r in zip(got, ref):
            np.testing.assert_allclose(a, r, rtol=1e-12, atol=1e-12)


class TestUpsample:
    def test_constant_field(self):
        x = T.Tensor(np.full((2, 3, 4, 5), 0.7))
        out = T.bilinear_upsample2x(x)
        assert out.shape == (2, 3, 8, 10)
        np.testing.assert_allclose(out.data, 0.7, rtol=0, atol=1e-15)

    def test_golden_two_pixels(self):
        # half-pixel centres: outputs sample source x = -1/4, 1/4, 3/4, 5/4 (clamped at the edges)
        a, b = 2.0, 6.0
        out = T.bilinear_upsample2x(T.Tensor(np.array([[[[a, b]]]]))).data
        golden = np.array([a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b])
        assert out.shape == (1, 1, 2, 4)
        np.testing.assert_allclose(out[0, 0, 0], golden)
        np.testing.assert_array_equal(out[0, 0, 0], out[0, 0, 1])
        np.testing.assert_allclose(out[0, 0, 0], [2.0, 3.0, 5.0, 6.0])

    def test_gradients(self, rng):
        x = leaf(rng, 2, 2, 3, 4)
        fn = lambda: weighted_sum(T.bilinear_upsample2x(x), np.random.default_rng(1))
        assert check_gradients(fn, [x]) < SINGLE_OP_TOL

    def test_single_pixel(self):
        out = T.bilinear_upsample2x(T.Tensor(np.array([[[[3.0]]]])))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))


class TestElementwise:
    def test_values(self):
        assert T.sigmoid(T.Tensor(np.array(0.0))).item() == 0.5
        assert T.tanh(T.Tensor(np.array(0.0))).item() == 0.0
        assert T.one_minus(T.Tensor(np.array(0.25))).item() == 0.75

    def test_sigmoid_stays_open_interval(self):
        for dt in (np.float32, np.float64):
            s = T.sigmoid(T.Tensor(np.array([-1000.0, 40.0, 1000.0], dtype=dt))).data
            assert np.all(s > 0) and np.all(s < 1)

    @pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.one_minus, T.square, T.leaky_relu])
    def test_unary_gradients(self, rng, op):
        x = leaf(rng, 3, 4)
        x.data[np.abs(x.data) < 1e-3] = 0.5  # keep away from the leaky kink
        assert check_gradients(lambda: weighted_sum(op(x), np.random.default_rng(2)), [x]) < SINGLE_OP_TOL

    def test_log_and_clip_gradients(self, rng):
        x = T.Tensor(rng.uniform(0.1, 0.9, size=(3, 4)), requires_grad=True)
        assert check_gradients(lambda: weighted_sum(T.log(x), np.random.default_rng(3)), [x]) < SINGLE_OP_TOL
        y = T.Tensor(rng.uniform(-1, 2, size=(3, 4)), requires_grad=True)
        y.data[np.abs(y.data) < 1e-3] += 0.01
        y.data[np.abs(y.data - 1) < 1e-3] += 0.01
        assert check_gradients(lambda: weighted_sum(T.clip(y, 0.0, 1.0), np.random.default_rng(3)), [y]) < SINGLE_OP_TOL

    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
    def test_binary_gradients(self, rng, op):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
        assert check_gradients(lambda: weighted_sum(op(a, b), np.random.default_rng(4)), [a, b]) < SINGLE_OP_TOL

    def test_mul_gradient_is_other_factor(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
        ga, gb = T.grad(T.sum_all(a * b), [a, b])
        np.testing.assert_array_equal(ga, b.data)
        np.testing.assert_array_equal(gb, a.data)

    def test_no_implicit_broadcast(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((1, 3))))
        with pytest.raises(ValueError, match="shape mismatch"):
            T.mul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros(3)))

    def test_scalar_operands(self):
        x = T.Tensor(np.array([1.0, 2.0]))
        np.testing.assert_array_equal((x * 3.0 + 1.0).data, [4.0, 7.0])
        np.testing.assert_array_equal((1.0 - x).data, [0.0, -1.0])


class TestConcat:
    def test_layout_and_round_trip(self, rng):
        a = T.Tensor(rng.random((2, 2, 3, 3)))
        b = T.Tensor(rng.random((2, 3, 3, 3)))
        c = T.concat_channels(a, b)
        assert c.shape == (2, 5, 3, 3)
        np.testing.assert_array_equal(T.channel_slice(c, 0, 2).data, a.data)
        np.testing.assert_array_equal(T.channel_slice(c, 2, 5).data, b.data)

    def test_gradient(self, rng):
        a, b = leaf(rng, 2, 2, 3, 3), leaf(rng, 2, 3, 3, 3)
        fn = lambda: weighted_sum(T.concat_channels(a, b), np.random.default_rng(5))
        assert check_gradients(fn, [a, b]) < SINGLE_OP_TOL

    def test_mismatch(self):
        with pytest.raises(ValueError):
            T.concat_channels(T.Tensor(np.zeros((1, 2, 3, 3))), T.Tensor(np.zeros((1, 2, 4, 3))))

    def test_stack_take_reshape_expand_gradients(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
        fn = lambda: weighted_sum(T.reshape(T.stack([a, b], axis=1), (4, 3)), np.random.default_rng(6))
        assert check_gradients(fn, [a, b]) < SINGLE_OP_TOL
        x = leaf(rng, 2, 3, 4)
        assert check_gradients(lambda: weighted_sum(T.take(x, 1, 2), np.random.default_rng(7)), [x]) < SINGLE_OP_TOL
        v = leaf(rng, 3)
        fn = lambda: weighted_sum(T.expand_channels(v, 2, 4, 5), np.random.default_rng(8))
        assert check_gradients(fn, [v]) < SINGLE_OP_TOL


class TestReduceMean:
    def test_plain(self):
        assert T.reduce_mean(T.Tensor(np.array([1.0, 2.0, 3.0, 4.0]))).item() == 2.5

    def test_masked_excludes(self):
        out = T.reduce_mean(T.Tensor(np.array([10.0, 999.0])), mask=np.array([1, 0]))
        assert out.item() == 10.0

    def test_all_masked_is_error(self):
        with pytest.raises(ValueError, match="undefined"):
            T.reduce_mean(T.Tensor(np.array([1.0, 2.0])), mask=np.array([0, 0]))

    def test_masked_gradient(self, rng):
        x = leaf(rng, 3, 4)
        mask = (rng.random((3, 4)) > 0.4).astype(np.uint8)
        mask[0, 0] = 1
        (g,) = T.grad(T.reduce_mean(x, mask), [x])
        np.testing.assert_allclose(g, mask / mask.sum())
        assert check_gradients(lambda: T.reduce_mean(x, mask), [x]) < SINGLE_OP_TOL


class TestBackward:
    def test_sum_gives_ones(self, rng):
        w = leaf(rng, 3, 2)
        T.backward(T.sum_all(w))
        np.testing.assert_array_equal(w.grad, np.ones((3, 2)))

    def test_square_sum(self, rng):
        w = leaf(rng, 3, 2)
        T.backward(T.sum_all(w * w))
        np.testing.assert_allclose(w.grad, 2 * w.data)

    def test_two_branches_accumulate(self, rng):
        w = leaf(rng, 4)
        a = T.Tensor(rng.normal(size=4))
        b = T.Tensor(rng.normal(size=4))
        T.backward(T.sum_all(w * a) + T.sum_all(T.tanh(w) * b))
        expected = a.data + b.data * (1 - np.tanh(w.data) ** 2)
        np.testing.assert_allclose(w.grad, expected, rtol=1e-14)

    def test_grads_accumulate_across_calls(self, rng):
        w = leaf(rng, 3)
        T.backward(T.sum_all(w))
        T.backward(T.sum_all(w))
        np.testing.assert_array_equal(w.grad, np.full(3, 2.0))

    def test_non_scalar_rejected(self, rng):
        w = leaf(rng, 3)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(w * 2.0)

    def test_second_backward_rejected(self, rng):
        w = leaf(rng, 3)
        loss = T.sum_all(T.tanh(w))
        T.backward(loss)
        with pytest.raises(RuntimeError, match="consumed"):
            T.backward(loss)

    def test_retain_graph_allows_repeat(self, rng):
        w = leaf(rng, 3)
        loss = T.sum_all(T.tanh(w))
        T.backward(loss, retain_graph=True)
        first = w.grad.copy()
        T.backward(loss)
        np.testing.assert_allclose(w.grad, 2 * first)

    def test_no_grad_records_nothing(self, rng):
        w = leaf(rng, 3)
        with T.no_grad():
            y = T.tanh(w)
        assert y.node is None and not y.requires_grad

    def test_tape_is_creation_ordered(self, rng):
        w = leaf(rng, 3)
        a = T.tanh(w)
        b = T.sigmoid(a)
        c = T.sum_all(b * a)
        order = [t.node.seq for t in T._topo(c)]
        assert order == sorted(order, reverse=True)

    def test_determinism(self, rng):
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)

        def run():
            xt, wt = T.Tensor(x.copy()), T.Tensor(w.copy(), requires_grad=True)
            y = T.sigmoid(T.conv2d(T.bilinear_upsample2x(xt), wt))
            return y.data, T.grad(T.reduce_mean(y), [wt])[0]

        (y1, g1), (y2, g2) = run(), run()
        assert y1.tobytes() == y2.tobytes() and g1.tobytes() == g2.tobytes()


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 2), st.integers(1, 3), st.integers(1, 3),
    st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3]), st.sampled_from([1, 2]),
)
def test_conv_gradient_property(b, cin, cout, h, w, k, s):
    rng = np.random.default_rng(b * 1000 + cin * 100 + cout * 10 + h + w)
    x, ker, bias = leaf(rng, b, cin, 2 * h, 2 * w), leaf(rng, cout, cin, k, k), leaf(rng, cout)
    fn = lambda: weighted_sum(T.conv2d(x, ker, bias, stride=s), np.random.default_rng(9))
    assert check_gradients(fn, [x, ker, bias]) < SINGLE_OP_TOL


def test_gradient_check_catches_a_wrong_backward(rng):
    a = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)

    def doubled_square(x):
        return T._result(x.data**2, "bad_square", (x,), lambda g: (4 * x.data * g,))

    assert check_gradients(lambda: T.sum_all(doubled_square(a)), [a]) > 0.4
