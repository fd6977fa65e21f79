"""Network building blocks: residual blocks, ConvGRU/ResGRU cells, output head."""

import math

import numpy as np

from . import tensor as T


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, T.Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())


def _param(shape, rng, bound, dtype):
    if bound == 0:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return T.Tensor(data, requires_grad=True)


class Conv2d(Module):
    """k x k convolution with same padding; fan-in scaled uniform init, zero bias."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, rng=None, dtype=np.float32):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = _param(
            (out_channels, in_channels, kernel_size, kernel_size), rng, math.sqrt(3.0 / fan_in), dtype
        )
        self.bias = _param((out_channels,), rng, 0, dtype)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


class ResidualBlock(Module):
    """conv(k, s) -> leaky -> conv(k, 1), plus a shortcut, then leaky.

    The shortcut is a strided 1x1 convolution when the stride is 2 or the
    channel count changes, otherwise the input itself.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, slope=0.2,
                 rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.slope = slope
        self.conv1 = Conv2d(in_channels, out_channels, kernel_size, stride, rng, dtype)
        self.conv2 = Conv2d(out_channels, out_channels, kernel_size, 1, rng, dtype)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride, rng, dtype)
        else:
            self.shortcut = None

    def __call__(self, x):
        x = T.as_tensor(x)
        if self.stride == 2 and (x.shape[2] % 2 or x.shape[3] % 2):
            raise ValueError(f"stride-2 residual block needs even spatial dims, got {x.shape[2:]}")
        y = self.conv2(T.leaky_relu(self.conv1(x), self.slope))
        skip = x if self.shortcut is None else self.shortcut(x)
        return T.leaky_relu(y + skip, self.slope)


def residual_block_forward(block, x):
    return block(x)


class GRUCell(Module):
    """Shared gating logic for the convolutional GRU variants.

        z  = sigmoid(G_z([x, h]))
        r  = sigmoid(G_r([x, h]))
        h~ = tanh(G_h([x, r * h]))
        h' = (1 - z) * h + z * h~

    Subclasses supply the gate transforms G. A cell built with ``drive=True``
    owns a learned per-channel input that replaces x when unrolled without
    inputs.
    """

    def __init__(self, input_channels, state_channels, drive=False, dtype=np.float32):
        self.input_channels = input_channels
        self.state_channels = state_channels
        if drive:
            self.drive = T.Tensor(np.zeros(input_channels, dtype=dtype), requires_grad=True)
        else:
            self.drive = None

    def gates(self, xh):
        raise NotImplementedError

    def candidate(self, xrh):
        raise NotImplementedError

    def step(self, x, h):
        x, h = T.as_tensor(x), T.as_tensor(h)
        if x.ndim != 4 or h.ndim != 4:
            raise ValueError("gru_step expects 4-D input and state")
        if x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
            raise ValueError(f"gru_step: input {x.shape} and state {h.shape} do not align")
        if x.shape[1] != self.input_channels or h.shape[1] != self.state_channels:
            raise ValueError(
                f"gru_step: expected {self.input_channels} input / {self.state_channels} state "
                f"channels, got {x.shape[1]} / {h.shape[1]}"
            )
        z, r = self.gates(T.concat_channels(x, h))
        h_cand = T.tanh(self.candidate(T.concat_channels(x, r * h)))
        return T.one_minus(z) * h + z * h_cand

    def drive_input(self, batch, height, width):
        if self.drive is None:
            raise ValueError("cell has no learned drive input; pass explicit inputs")
        return T.expand_channels(self.drive, batch, height, width)


class ConvGRUCell(GRUCell):
    """GRU with a single k x k convolution per gate."""

    def __init__(self, input_channels, state_channels, kernel_size=3, drive=False,
                 rng=None, dtype=np.float32):
        super().__init__(input_channels, state_channels, drive, dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        cin = input_channels + state_channels
        self.update = Conv2d(cin, state_channels, kernel_size, 1, rng, dtype)
        self.reset = Conv2d(cin, state_channels, kernel_size, 1, rng, dtype)
        self.cand = Conv2d(cin, state_channels, kernel_size, 1, rng, dtype)

    def gates(self, xh):
        # both gates read the same input: one convolution with stacked kernels
        w = T.concat((self.update.weight, self.reset.weight), axis=0)
        b = T.concat((self.update.bias, self.reset.bias), axis=0)
        zr = T.sigmoid(T.conv2d(xh, w, b))
        c = self.state_channels
        return T.channel_slice(zr, 0, c), T.channel_slice(zr, c, 2 * c)

    def candidate(self, xrh):
        return self.cand(xrh)


class ResGRUCell(GRUCell):
    """GRU whose gate convolutions are stride-1 residual blocks, one per gate."""

    def __init__(self, input_channels, state_channels, kernel_size=3, drive=False,
                 rng=None, dtype=np.float32):
        super().__init__(input_channels, state_channels, drive, dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        cin = input_channels + state_channels
        self.update = ResidualBlock(cin, state_channels, kernel_size, 1, rng=rng, dtype=dtype)
        self.reset = ResidualBlock(cin, state_channels, kernel_size, 1, rng=rng, dtype=dtype)
        self.cand = ResidualBlock(cin, state_channels, kernel_size, 1, rng=rng, dtype=dtype)

    def gates(self, xh):
        return T.sigmoid(self.update(xh)), T.sigmoid(self.reset(xh))

    def candidate(self, xrh):
        return self.cand(xrh)


def gru_step(cell, x_t, h_prev):
    return cell.step(x_t, h_prev)


def gru_unroll(cell, inputs, h0, steps):
    """Run ``steps`` GRU updates from ``h0``; returns the list of new states.

    With ``inputs=None`` the cell's learned drive input is fed at every step.
    """
    if steps <= 0:
        raise ValueError(f"steps must be positive, got {steps}")
    h0 = T.as_tensor(h0)
    if inputs is not None and len(inputs) != steps:
        raise ValueError(f"got {len(inputs)} inputs for {steps} steps")
    if inputs is None:
        b, _, hh, ww = h0.shape
        drive = cell.drive_input(b, hh, ww)
        inputs = [drive] * steps
    states = []
    h = h0
    for x in inputs:
        h = cell.step(x, h)
        states.append(h)
    return states


class ProjectionHead(Module):
    """1x1 convolution to a single channel followed by a sigmoid."""

    def __init__(self, in_channels, rng=None, dtype=np.float32):
        self.proj = Conv2d(in_channels, 1, 1, 1, rng, dtype)

    def __call__(self, x):
        return T.sigmoid(self.proj(x))


def projection_forward(head, x):
    return head(x)
