"""Checkpoint files: weights, Adam moments and scheduler state.

Layout (little-endian)::

    b"W4CK"  u32 version
    u32 n + UTF-8 config echo (JSON)
    u32 count, then per tensor: u16 n + UTF-8 name, u8 rank, u32 dims[rank], f32 data
    u32 count, Adam moment tensors named "adam.m.<param>" / "adam.v.<param>"
    u64 adam step, f64 lr, f64 beta1, f64 beta2, f64 eps
    f64 lr, f64 best_metric, u32 epochs_since_improvement, u8 stopped, u8 improved,
    f64 decay_factor, u32 patience_decay, u32 patience_stop
    f64 metric, u32 epoch
"""

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .optim import AdamState, SchedulerState

MAGIC = b"W4CK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    weights: dict  # name -> float32 array, in model parameter order
    adam: AdamState = field(default_factory=AdamState)
    scheduler: SchedulerState = field(default_factory=SchedulerState)
    config: str = "{}"
    metric: float = float("nan")
    epoch: int = 0


def _write_tensor(f, name, arr):
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    f.write(struct.pack("<H", len(raw)) + raw)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f4").tobytes())


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def unpack(self, fmt):
        try:
            vals = struct.unpack_from(fmt, self.buf, self.pos)
        except struct.error:
            raise CheckpointError(f"{self.path}: truncated checkpoint") from None
        self.pos += struct.calcsize(fmt)
        return vals

    def text(self, fmt):
        (n,) = self.unpack(fmt)
        raw = self.buf[self.pos : self.pos + n]
        if len(raw) != n:
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        self.pos += n
        return raw.decode("utf-8")

    def tensor(self):
        name = self.text("<H")
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims, dtype=np.int64))
        end = self.pos + 4 * count
        if end > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated data for tensor {name!r}")
        arr = np.frombuffer(self.buf, dtype="<f4", count=count, offset=self.pos).reshape(dims)
        self.pos = end
        return name, arr.astype(np.float32)


def checkpoint_bytes(ckpt):
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    cfg = ckpt.config.encode("utf-8")
    f.write(struct.pack("<I", len(cfg)) + cfg)
    names = list(ckpt.weights)
    f.write(struct.pack("<I", len(names)))
    for name in names:
        _write_tensor(f, name, ckpt.weights[name])
    a = ckpt.adam
    moments = []
    if a.m:
        moments = [(f"adam.m.{n}", m) for n, m in zip(names, a.m)]
        moments += [(f"adam.v.{n}", v) for n, v in zip(names, a.v)]
    f.write(struct.pack("<I", len(moments)))
    for name, arr in moments:
        _write_tensor(f, name, arr)
    f.write(struct.pack("<Q4d", a.t, a.lr, a.beta1, a.beta2, a.eps))
    s = ckpt.scheduler
    f.write(struct.pack(
        "<2dI2BdII", s.lr, s.best_metric, s.epochs_since_improvement, int(s.stopped),
        int(s.improved), s.decay_factor, s.patience_decay, s.patience_stop,
    ))
    f.write(struct.pack("<dI", ckpt.metric, ckpt.epoch))
    return f.getvalue()


def save_checkpoint(ckpt, path):
    data = checkpoint_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, not a checkpoint")
    r = _Reader(buf, path)
    r.pos = 4
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    config = r.text("<I")
    (count,) = r.unpack("<I")
    weights = dict(r.tensor() for _ in range(count))
    (count,) = r.unpack("<I")
    moments = dict(r.tensor() for _ in range(count))
    t, lr, b1, b2, eps = r.unpack("<Q4d")
    names = list(weights)
    adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=t)
    if moments:
        try:
            adam.m = [moments[f"adam.m.{n}"] for n in names]
            adam.v = [moments[f"adam.v.{n}"] for n in names]
        except KeyError as e:
            raise CheckpointError(f"{path}: missing Adam moment {e.args[0]}") from None
    s_lr, best, since, stopped, improved, decay, p_decay, p_stop = r.unpack("<2dI2BdII")
    sched = SchedulerState(
        lr=s_lr, best_metric=best, epochs_since_improvement=since, stopped=bool(stopped),
        improved=bool(improved), decay_factor=decay, patience_decay=p_decay, patience_stop=p_stop,
    )
    metric, epoch = r.unpack("<dI")
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return Checkpoint(weights, adam, sched, config, metric, epoch)


def model_weights(model):
    return {name: p.data.astype(np.float32) for name, p in model.named_parameters()}


def load_weights(model, weights):
    """Copy ``weights`` into ``model``; every name and shape must match."""
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in weights]
    extra = [n for n in weights if n not in params]
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match model: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    for name, p in params.items():
        w = weights[name]
        if w.shape != p.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {w.shape}, model shape {p.shape}")
    for name, p in params.items():
        p.data = np.array(weights[name], dtype=p.dtype)
