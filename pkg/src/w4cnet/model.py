"""Encoder-forecaster network with GRU-state shortcuts between matching depths."""

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import tensor as T
from .layers import ConvGRUCell, Module, ProjectionHead, ResGRUCell, ResidualBlock, Conv2d, gru_unroll

VARIANTS = ("convgru", "resgru")


@dataclass
class ModelConfig:
    variant: str = "convgru"
    depth: int = 4
    stage_channels: list = field(default_factory=lambda: [32, 64, 128, 256])
    input_channels: int = 7
    input_frames: int = 4
    output_frames: int = 32
    gru_kernel: int = 3
    block_kernel: int = 3

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if len(self.stage_channels) != self.depth:
            raise ValueError(
                f"stage_channels has {len(self.stage_channels)} entries for depth {self.depth}"
            )
        for name in ("gru_kernel", "block_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be a positive odd integer, got {k}")
        for name in ("input_channels", "input_frames", "output_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def check_geometry(self, height, width):
        f = 2**self.depth
        if height % f or width % f:
            raise ValueError(
                f"spatial size {height}x{width} is not divisible by 2^depth = {f}"
            )

    def stage_resolutions(self, height, width):
        self.check_geometry(height, width)
        return [(height >> d, width >> d) for d in range(1, self.depth + 1)]

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def default_config(variant="convgru"):
    """The shipped full-size configuration for ``variant``."""
    text = resources.files("w4cnet.configs").joinpath(f"{variant}.json").read_text()
    return ModelConfig.from_dict(json.loads(text)["model"])


class EncoderForecaster(Module):
    """Four-stage (by default) recurrent encoder and mirrored forecaster.

    Encoder stage d: stride-2 residual block per frame, then a GRU started
    from zeros. Forecaster stage d: GRU started from a convolution of the
    encoder's final state at depth d, then 2x bilinear upsampling and a
    stride-1 residual block per frame. The deepest forecaster GRU is driven
    by a learned constant input; shallower ones consume the upsampled output
    sequence of the stage below. The projection head is applied per frame.
    """

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        cfg = config
        cell_cls = ConvGRUCell if cfg.variant == "convgru" else ResGRUCell
        chans = cfg.stage_channels
        kb, kg = cfg.block_kernel, cfg.gru_kernel

        self.enc_blocks = []
        self.enc_cells = []
        prev = cfg.input_channels
        for c in chans:
            self.enc_blocks.append(ResidualBlock(prev, c, kb, stride=2, rng=rng, dtype=dtype))
            self.enc_cells.append(cell_cls(c, c, kg, rng=rng, dtype=dtype))
            prev = c
        self.shortcuts = [Conv2d(c, c, kb, 1, rng, dtype) for c in chans]
        self.dec_cells = []
        self.dec_blocks = []
        for d, c in enumerate(chans):
            deepest = d == cfg.depth - 1
            self.dec_cells.append(cell_cls(c, c, kg, drive=deepest, rng=rng, dtype=dtype))
            out_c = chans[d - 1] if d > 0 else chans[0]
            self.dec_blocks.append(ResidualBlock(c, out_c, kb, stride=1, rng=rng, dtype=dtype))
        self.head = ProjectionHead(chans[0], rng=rng, dtype=dtype)

    def __call__(self, x, trace=None, shortcut_scale=None):
        return self.forward(x, trace=trace, shortcut_scale=shortcut_scale)

    def forward(self, x, trace=None, shortcut_scale=None):
        """Map (B, input_frames, Cin, H, W) to (B, output_frames, 1, H, W).

        ``trace``, if a list, receives one (name, shape) entry per encoder and
        forecaster stage. ``shortcut_scale`` multiplies the shortcut
        convolution outputs (diagnostic hook; None leaves them untouched).
        """
        cfg = self.config
        x = T.as_tensor(x, dtype=self.dtype)
        if x.dtype != self.dtype:
            x = T.Tensor(x.data.astype(self.dtype))
        if x.ndim != 5:
            raise ValueError(f"expected a 5-D input (B, T, C, H, W), got shape {x.shape}")
        b, t_in, c_in, h, w = x.shape
        if t_in != cfg.input_frames:
            raise ValueError(f"expected {cfg.input_frames} input frames, got {t_in}")
        if c_in != cfg.input_channels:
            raise ValueError(f"expected {cfg.input_channels} input channels, got {c_in}")
        cfg.check_geometry(h, w)

        seq = [T.take(x, 1, i) for i in range(t_in)]
        finals = []
        for d in range(cfg.depth):
            seq = [self.enc_blocks[d](f) for f in seq]
            _, c, hh, ww = seq[0].shape
            h0 = T.Tensor(np.zeros((b, c, hh, ww), dtype=self.dtype))
            seq = gru_unroll(self.enc_cells[d], seq, h0, t_in)
            finals.append(seq[-1])
            if trace is not None:
                trace.append((f"encoder{d}", seq[-1].shape))

        inputs = None
        for d in reversed(range(cfg.depth)):
            h0 = self.shortcuts[d](finals[d])
            if shortcut_scale is not None:
                h0 = h0 * shortcut_scale
            states = gru_unroll(self.dec_cells[d], inputs, h0, cfg.output_frames)
            if trace is not None:
                trace.append((f"forecaster{d}", states[-1].shape))
            inputs = [self.dec_blocks[d](T.bilinear_upsample2x(s)) for s in states]
        frames = [self.head(f) for f in inputs]
        return T.stack(frames, axis=1)


def build(config, seed=0, dtype=np.float32):
    """Deterministically initialized model for ``config``."""
    return EncoderForecaster(config, seed=seed, dtype=dtype)


def parameter_count(model):
    return model.parameter_count()


def expected_parameter_count(config):
    """Closed-form weight count, independent of the module tree."""
    cfg = config

    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    def block(cin, cout, k, stride):
        n = conv(cin, cout, k) + conv(cout, cout, k)
        if stride != 1 or cin != cout:
            n += conv(cin, cout, 1)
        return n

    def cell(c):
        if cfg.variant == "convgru":
            return 3 * conv(2 * c, c, cfg.gru_kernel)
        return 3 * block(2 * c, c, cfg.gru_kernel, 1)

    total = 0
    prev = cfg.input_channels
    chans = cfg.stage_channels
    for d, c in enumerate(chans):
        total += block(prev, c, cfg.block_kernel, 2) + cell(c)
        total += conv(c, c, cfg.block_kernel)
        total += cell(c) + block(c, chans[d - 1] if d else c, cfg.block_kernel, 1)
        prev = c
    total += chans[-1]  # learned drive input of the deepest forecaster GRU
    total += conv(chans[0], 1, 1)
    return total
