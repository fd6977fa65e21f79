"""Dense float tensors with tape-based reverse-mode differentiation.

Only the operations the encoder-forecaster network needs are provided. Each
operation computes its value eagerly with numpy and, when gradients are being
tracked, records a :class:`TapeNode` holding the inputs and a closure over the
intermediates its backward rule needs.

Tape policy: :func:`backward` consumes the graph it walks (saved intermediates
are released). Calling it a second time on the same graph raises unless the
first call passed ``retain_graph=True``.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np

FLOAT_TYPES = (np.float32, np.float64)

# im2col buffers are built in batch chunks no larger than this
_COL_BYTES = 64 * 2**20

_local = threading.local()
_seq = itertools.count()


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False

    def __repr__(self):
        return f"TapeNode({self.op}, seq={self.seq})"


class Tensor:
    """n-dimensional float array with optional gradient tracking.

    Non-float input is converted to float32; float32/float64 arrays keep their
    dtype. 4-D tensors are laid out (batch, channel, height, width).
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, op, inputs, backward_fn):
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x):
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    if _is_scalar(b):
        a = as_tensor(a)
        return _result(a.data + a.dtype.type(b), "add", (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    if _is_scalar(b):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    if _is_scalar(b):
        a = as_tensor(a)
        s = a.dtype.type(b)
        return _result(a.data * s, "mul", (a,), lambda g: (g * s,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, "square", (a,), lambda g: (2 * g * ad,))


def one_minus(a):
    a = as_tensor(a)
    return _result(1 - a.data, "one_minus", (a,), lambda g: (-g,))


def sigmoid(a):
    """Logistic function, kept strictly inside (0, 1) for the tensor's dtype."""
    a = as_tensor(a)
    info = np.finfo(a.dtype)
    s = np.clip(0.5 * (1 + np.tanh(0.5 * a.data)), info.tiny, 1 - info.epsneg)
    return _result(s, "sigmoid", (a,), lambda g: (g * s * (1 - s),))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, "tanh", (a,), lambda g: (g * (1 - t * t),))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    pos = a.data > 0
    k = a.dtype.type(slope)
    out = np.where(pos, a.data, a.data * k)
    return _result(out, "leaky_relu", (a,), lambda g: (np.where(pos, g, g * k),))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient is passed only where lo <= a <= hi."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return _result(out, "clip", (a,), lambda g: (np.where(inside, g, 0),))


# ---------------------------------------------------------------------------
# shape manipulation


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _result(out, "concat", tuple(tensors), backward_fn)


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ValueError(f"concat_channels: mismatch {a.shape} vs {b.shape}")
    return concat((a, b), axis=1)


def channel_slice(a, start, stop):
    a = as_tensor(a)
    out = a.data[:, start:stop]
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(out, "channel_slice", (a,), backward_fn)


def take(a, axis, index):
    """Select one index along ``axis``, dropping that axis."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return _result(out, "take", (a,), backward_fn)


def stack(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _check_same_shape("stack", tensors[0], t)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(
        out, "stack", tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def expand_channels(v, batch, height, width):
    """Tile a per-channel vector of shape (C,) to (batch, C, height, width)."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ValueError("expand_channels expects a 1-D tensor")
    out = np.broadcast_to(v.data[None, :, None, None], (batch, v.shape[0], height, width)).copy()
    return _result(out, "expand_channels", (v,), lambda g: (g.sum(axis=(0, 2, 3)),))


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    a = as_tensor(a)
    shape = a.shape
    return _result(
        np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,),
        lambda g: (np.full(shape, g, dtype=a.dtype),),
    )


def reduce_mean(a, mask=None):
    """Mean over all elements, or over the elements where ``mask`` is 1."""
    a = as_tensor(a)
    if mask is None:
        n = a.data.size
        shape = a.shape
        return _result(
            np.asarray(a.data.mean(dtype=a.dtype), dtype=a.dtype), "mean", (a,),
            lambda g: (np.full(shape, g / n, dtype=a.dtype),),
        )
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape != a.shape:
        raise ValueError(f"reduce_mean: mask shape {m.shape} differs from input {a.shape}")
    m = m.astype(a.dtype)
    count = m.sum()
    if count == 0:
        raise ValueError("reduce_mean: mask selects no elements, mean is undefined")
    value = np.asarray((a.data * m).sum() / count, dtype=a.dtype)
    return _result(value, "masked_mean", (a,), lambda g: (g * m / count,))


# ---------------------------------------------------------------------------
# convolution and resampling


def _im2col(xp, k, stride, out_h, out_w):
    """(n, C, Hp, Wp) padded input -> (C*k*k, n*out_h*out_w) patch matrix.

    Rows are ordered (channel, kernel row, kernel column) to match a kernel
    reshaped to (Cout, C*k*k).
    """
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, out_h, out_w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride].transpose(
                1, 0, 2, 3
            )
    return cols.reshape(c * k * k, n * out_h * out_w)


def _col2im(gcols, gxp, k, stride, out_h, out_w):
    """Scatter-add a patch-matrix gradient back onto the padded input gradient."""
    n, c = gxp.shape[:2]
    gcols = gcols.reshape(c, k, k, n, out_h, out_w)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += gcols[:, i, j].transpose(
                1, 0, 2, 3
            )


def _chunks(n, bytes_per_item):
    step = max(1, _COL_BYTES // max(bytes_per_item, 1))
    return [(lo, min(n, lo + step)) for lo in range(0, n, step)]


def conv2d(x, weight, bias=None, stride=1, padding=None):
    """2-D cross-correlation with "same" padding (k-1)/2.

    x is (B, Cin, H, W), weight (Cout, Cin, k, k), bias (Cout,). Output is
    (B, Cout, H', W') with H' = (H + 2p - k) // stride + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects a 4-D input and a 4-D kernel")
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    k = kh
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise ValueError(f"conv2d: only same padding {pad} is supported for k={k}")
    b, c, h, w = x.shape
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if x.dtype != weight.dtype:
        raise ValueError(f"conv2d: dtype mismatch {x.dtype} vs {weight.dtype}")
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
        inputs = (x, weight, bias)

    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    w2 = weight.data.reshape(cout, -1)
    chunks = _chunks(b, out_h * out_w * cin * k * k * x.dtype.itemsize)
    tracking = is_grad_enabled() and any(t.requires_grad for t in inputs)

    out = np.empty((cout, b, out_h, out_w), dtype=x.dtype)
    saved_cols = None
    for lo, hi in chunks:
        cols = _im2col(xp[lo:hi], k, stride, out_h, out_w)
        np.matmul(w2, cols, out=out[:, lo:hi].reshape(cout, -1))
        if tracking and len(chunks) == 1:
            saved_cols = cols
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward_fn(g):
        g_cn = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gw = np.zeros_like(w2)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for lo, hi in chunks:
            g2 = g_cn[:, lo:hi].reshape(cout, -1)
            if weight.requires_grad:
                cols = saved_cols if saved_cols is not None else _im2col(xp[lo:hi], k, stride, out_h, out_w)
                gw += g2 @ cols.T
            if gxp is not None:
                _col2im(w2.T @ g2, gxp[lo:hi], k, stride, out_h, out_w)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        grads = (gx, gw.reshape(weight.shape))
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _result(out, "conv2d", inputs, backward_fn)


def _upsample_axis(a, axis):
    """Double ``axis`` with half-pixel (align-corners-false) linear weights.

    Output sample 2i sits at source coordinate i - 1/4 and 2i+1 at i + 1/4;
    coordinates outside the source are clamped to the edge sample.
    """
    n = a.shape[axis]
    prev = np.concatenate([np.take(a, [0], axis=axis), np.take(a, range(n - 1), axis=axis)], axis=axis)
    nxt = np.concatenate([np.take(a, range(1, n), axis=axis), np.take(a, [n - 1], axis=axis)], axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _upsample_axis_adjoint(g, axis):
    n = g.shape[axis] // 2
    split = list(g.shape)
    split[axis : axis + 1] = [n, 2]
    g = g.reshape(split)
    ge = np.take(g, 0, axis=axis + 1)
    go = np.take(g, 1, axis=axis + 1)
    out = 0.75 * (ge + go)

    def sl(lo, hi):
        idx = [slice(None)] * out.ndim
        idx[axis] = slice(lo, hi)
        return tuple(idx)

    # prev[i] = a[i-1] (a[0] for i=0); nxt[i] = a[i+1] (a[n-1] for i=n-1)
    out[sl(0, n - 1)] += 0.25 * ge[sl(1, n)]
    out[sl(0, 1)] += 0.25 * ge[sl(0, 1)]
    out[sl(1, n)] += 0.25 * go[sl(0, n - 1)]
    out[sl(n - 1, n)] += 0.25 * go[sl(n - 1, n)]
    return out


def bilinear_upsample2x(x):
    """(B, C, H, W) -> (B, C, 2H, 2W), bilinear, align-corners-false."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"bilinear_upsample2x expects a non-empty 4-D tensor, got {x.shape}")
    out = _upsample_axis(_upsample_axis(x.data, 2), 3).astype(x.dtype, copy=False)

    def backward_fn(g):
        return (_upsample_axis_adjoint(_upsample_axis_adjoint(g, 3), 2).astype(x.dtype, copy=False),)

    return _result(out, "upsample2x", (x,), backward_fn)


# ---------------------------------------------------------------------------
# reverse sweep


def _topo(root):
    seen = set()
    order = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(t.node.inputs)
    order.sort(key=lambda t: t.node.seq, reverse=True)
    return order


def _sweep(loss, retain_graph):
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"backward: loss is not finite ({loss.data.item()})")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    leaf_grads = {}
    leaves = {}
    if loss.node is None:
        leaf_grads[id(loss)] = np.ones_like(loss.data)
        leaves[id(loss)] = loss
        return leaves, leaf_grads

    grads = {id(loss): np.ones_like(loss.data)}
    for t in _topo(loss):
        node = t.node
        if node.consumed:
            raise RuntimeError(
                "backward: graph already consumed by an earlier backward; "
                "re-run the forward pass or pass retain_graph=True"
            )
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            target = leaf_grads if inp.node is None else grads
            if inp.node is None:
                leaves[id(inp)] = inp
            key = id(inp)
            if key in target:
                target[key] = target[key] + ig
            else:
                target[key] = ig
        if not retain_graph:
            node.consumed = True
            node.backward_fn = None
    return leaves, leaf_grads


def backward(loss, retain_graph=False):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add up across repeated backward calls and across multiple uses
    of a tensor. Only leaf tensors (parameters, inputs) receive ``.grad``.
    """
    leaves, leaf_grads = _sweep(loss, retain_graph)
    for key, g in leaf_grads.items():
        t = leaves[key]
        g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g


def grad(loss, tensors, retain_graph=False):
    """Return d(loss)/d(t) for each leaf ``t`` without touching ``.grad``.

    Safe to call concurrently on independent graphs that share read-only
    leaves. Unreached tensors get a zero array.
    """
    leaves, leaf_grads = _sweep(loss, retain_graph)
    out = []
    for t in tensors:
        g = leaf_grads.get(id(t))
        if g is None:
            out.append(np.zeros_like(t.data))
        else:
            out.append(np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return out
