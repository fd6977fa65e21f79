"""Frame archives, gapless window extraction, D4 augmentation and batching.

Archive file layout (little-endian)::

    b"W4CF"  u32 version=1  u32 T, C, S, H, W
    u64 timestamps[T]
    C+S channel names, each u16 byte length + UTF-8
    f32 frames[T*C*H*W]   u8 mask[T*C*H*W]   f32 static[S*H*W]
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"W4CF"
VERSION = 1
STEP_SECONDS = 900
VARIABLES = ("temperature", "crr_intensity", "asii_turb_trop_prob", "cma")
STATIC_NAMES = ("elevation", "latitude", "longitude")


class ArchiveFormatError(ValueError):
    pass


@dataclass
class FrameArchive:
    frames: np.ndarray  # (T, C, H, W) float32 in [0, 1]
    valid_mask: np.ndarray  # (T, C, H, W) uint8 in {0, 1}
    timestamps: np.ndarray  # (T,) int64 seconds, strictly increasing
    channel_names: list
    static: np.ndarray = None  # (S, H, W) float32 in [0, 1]
    static_names: list = field(default_factory=list)
    region: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.valid_mask = np.asarray(self.valid_mask, dtype=np.uint8)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.channel_names = list(self.channel_names)
        self.static_names = list(self.static_names)
        if self.static is None:
            self.static = np.zeros((0,) + self.frames.shape[2:], dtype=np.float32)
        self.static = np.asarray(self.static, dtype=np.float32)
        self.validate()

    def validate(self):
        if self.frames.ndim != 4:
            raise ArchiveFormatError(f"frames must be 4-D (T, C, H, W), got {self.frames.shape}")
        t, c, h, w = self.frames.shape
        if self.valid_mask.shape != self.frames.shape:
            raise ArchiveFormatError("valid_mask shape differs from frames")
        if self.timestamps.shape != (t,):
            raise ArchiveFormatError(f"expected {t} timestamps, got {self.timestamps.shape}")
        if len(self.channel_names) != c:
            raise ArchiveFormatError(f"expected {c} channel names, got {len(self.channel_names)}")
        if self.static.ndim != 3 or self.static.shape[1:] != (h, w):
            raise ArchiveFormatError(f"static must be (S, {h}, {w}), got {self.static.shape}")
        if len(self.static_names) != self.static.shape[0]:
            raise ArchiveFormatError("static_names length differs from static channel count")
        if t > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ArchiveFormatError("timestamps are not strictly increasing")
        for name, arr in (("frames", self.frames), ("static", self.static)):
            if arr.size and not (np.isfinite(arr).all() and arr.min() >= 0 and arr.max() <= 1):
                raise ArchiveFormatError(f"{name} values must lie in [0, 1]")
        if self.valid_mask.size and self.valid_mask.max() > 1:
            raise ArchiveFormatError("mask values must be 0 or 1")

    @property
    def shape(self):
        return self.frames.shape

    def channel_index(self, name):
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise KeyError(f"channel {name!r} not in archive ({self.channel_names})") from None

    def gap_boundaries(self):
        """Indices i where frame i does not follow frame i-1 by exactly one step."""
        return [int(i) + 1 for i in np.flatnonzero(np.diff(self.timestamps) != STEP_SECONDS)]

    def runs(self):
        """Maximal gapless runs as (start, length) pairs."""
        edges = [0] + self.gap_boundaries() + [len(self.timestamps)]
        return [(a, b - a) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def save_archive(archive, path):
    t, c, h, w = archive.frames.shape
    s = archive.static.shape[0]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<6I", VERSION, t, c, s, h, w))
        f.write(archive.timestamps.astype("<u8").tobytes())
        for name in list(archive.channel_names) + list(archive.static_names):
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(archive.frames.astype("<f4").tobytes())
        f.write(archive.valid_mask.astype("u1").tobytes())
        f.write(archive.static.astype("<f4").tobytes())


def load_archive(path, region=""):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise ArchiveFormatError(f"{path}: bad magic {buf[:4]!r}, not a frame archive")
    if len(buf) < 28:
        raise ArchiveFormatError(f"{path}: truncated header")
    version, t, c, s, h, w = struct.unpack_from("<6I", buf, 4)
    if version != VERSION:
        raise ArchiveFormatError(f"{path}: unsupported archive version {version}")
    pos = 28
    try:
        timestamps = np.frombuffer(buf, dtype="<u8", count=t, offset=pos).astype(np.int64)
        pos += 8 * t
        names = []
        for _ in range(c + s):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            names.append(buf[pos : pos + n].decode("utf-8"))
            pos += n
        nvals = t * c * h * w
        frames = np.frombuffer(buf, dtype="<f4", count=nvals, offset=pos).reshape(t, c, h, w)
        pos += 4 * nvals
        mask = np.frombuffer(buf, dtype="u1", count=nvals, offset=pos).reshape(t, c, h, w)
        pos += nvals
        static = np.frombuffer(buf, dtype="<f4", count=s * h * w, offset=pos).reshape(s, h, w)
        pos += 4 * s * h * w
    except (ValueError, struct.error, UnicodeDecodeError) as e:
        raise ArchiveFormatError(f"{path}: corrupt archive body ({e})") from None
    if pos != len(buf):
        raise ArchiveFormatError(f"{path}: {len(buf) - pos} trailing bytes after archive body")
    return FrameArchive(
        frames=frames.astype(np.float32),
        valid_mask=mask.copy(),
        timestamps=timestamps,
        channel_names=names[:c],
        static=static.astype(np.float32),
        static_names=names[c:],
        region=region,
    )


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class ChannelSpec:
    """Physical range and missing-value sentinel of a raw channel."""

    name: str
    vmin: float
    vmax: float
    sentinel: float = None


# Placeholder physical ranges; the real products' scalings are not needed here.
DEFAULT_SPECS = {
    "temperature": ChannelSpec("temperature", 200.0, 320.0, sentinel=0.0),
    "crr_intensity": ChannelSpec("crr_intensity", 0.0, 50.0, sentinel=-1.0),
    "asii_turb_trop_prob": ChannelSpec("asii_turb_trop_prob", 0.0, 100.0, sentinel=-1.0),
    "cma": ChannelSpec("cma", 0.0, 1.0, sentinel=-1.0),
}


def normalize(raw, spec):
    """Affine map of ``raw`` onto [0, 1]; sentinel pixels get value 0, mask 0."""
    if spec.vmax == spec.vmin:
        raise ValueError(f"channel {spec.name}: min equals max ({spec.vmin})")
    raw = np.asarray(raw, dtype=np.float64)
    valid = np.isfinite(raw)
    if spec.sentinel is not None:
        valid &= raw != spec.sentinel
    scaled = (raw - spec.vmin) / (spec.vmax - spec.vmin)
    values = np.where(valid, np.clip(scaled, 0.0, 1.0), 0.0).astype(np.float32)
    return values, valid.astype(np.uint8)


def denormalize(values, spec):
    return np.asarray(values, dtype=np.float64) * (spec.vmax - spec.vmin) + spec.vmin


# ---------------------------------------------------------------------------
# windows


@dataclass
class SampleWindow:
    inputs: np.ndarray  # (input_frames, C + S, H, W)
    targets: np.ndarray  # (output_frames, 1, H, W)
    target_mask: np.ndarray  # same shape as targets, uint8
    region: str = ""
    start: int = 0


def window_starts(archive, length=36):
    """Every start index whose ``length`` frames lie inside one gapless run."""
    if length < 1:
        raise ValueError(f"window length must be at least 1, got {length}")
    starts = []
    for run_start, run_len in archive.runs():
        starts.extend(range(run_start, run_start + max(0, run_len - length + 1)))
    return starts


def build_inputs(archive, start, input_frames):
    """Dynamic channels of ``input_frames`` frames with static channels appended."""
    dyn = archive.frames[start : start + input_frames]
    stat = np.broadcast_to(archive.static, (input_frames,) + archive.static.shape)
    return np.concatenate([dyn, stat], axis=1)


def extract_windows(archive, length=36, target="temperature", input_frames=4):
    if length <= input_frames:
        raise ValueError(f"window length {length} leaves no target frames after {input_frames} inputs")
    ci = archive.channel_index(target)
    windows = []
    for s in window_starts(archive, length):
        windows.append(SampleWindow(
            inputs=build_inputs(archive, s, input_frames),
            targets=archive.frames[s + input_frames : s + length, ci : ci + 1],
            target_mask=archive.valid_mask[s + input_frames : s + length, ci : ci + 1],
            region=archive.region,
            start=s,
        ))
    return windows


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentOp:
    """Left-right mirror, then top-down mirror, then ``rot`` counter-clockwise quarter turns."""

    rot: int = 0
    flip_h: int = 0
    flip_v: int = 0

    def apply(self, a):
        a = np.asarray(a)
        if self.rot % 2 and a.shape[-1] != a.shape[-2]:
            raise ValueError(f"odd quarter-turn rotation needs square frames, got {a.shape[-2:]}")
        if self.flip_h:
            a = a[..., ::-1]
        if self.flip_v:
            a = a[..., ::-1, :]
        if self.rot % 4:
            a = np.rot90(a, self.rot % 4, axes=(-2, -1))
        return np.ascontiguousarray(a)

    @classmethod
    def all(cls):
        return [cls(r, h, v) for r in range(4) for h in (0, 1) for v in (0, 1)]


def augment(window, op):
    return SampleWindow(
        inputs=op.apply(window.inputs),
        targets=op.apply(window.targets),
        target_mask=op.apply(window.target_mask),
        region=window.region,
        start=window.start,
    )


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    inputs: np.ndarray  # (B, input_frames, Cin, H, W)
    targets: np.ndarray  # (B, output_frames, 1, H, W)
    mask: np.ndarray  # (B, output_frames, 1, H, W) uint8
    indices: list
    ops: list


def collate(windows, indices, ops=None):
    ops = ops or [None] * len(indices)
    picked = [windows[i] if op is None else augment(windows[i], op) for i, op in zip(indices, ops)]
    return Batch(
        inputs=np.stack([w.inputs for w in picked]),
        targets=np.stack([w.targets for w in picked]),
        mask=np.stack([w.target_mask for w in picked]),
        indices=list(indices),
        ops=list(ops),
    )


def epoch_plan(n, batch_size, seed, epoch=0, augment=False):
    """Shuffled index batches and per-sample augment draws for one epoch."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    ops = [None] * n
    if augment:
        draws = rng.integers(0, [4, 2, 2], size=(n, 3))
        ops = [AugmentOp(int(r), int(h), int(v)) for r, h, v in draws]
    plan = []
    for lo in range(0, n, batch_size):
        idx = [int(i) for i in order[lo : lo + batch_size]]
        plan.append((idx, ops[lo : lo + batch_size]))
    return plan


def batch_iterator(windows, batch_size=32, seed=0, augment=False, epoch=0, workers=0, prefetch=2):
    """Yield the batches of one shuffled epoch; the last batch may be short.

    Order and augmentation depend only on (seed, epoch); ``workers`` > 0
    assembles batches on threads without changing what is yielded.
    """
    if not windows:
        raise ValueError("batch_iterator: no windows")
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    plan = epoch_plan(len(windows), batch_size, seed, epoch, augment)
    if workers <= 0:
        for idx, ops in plan:
            yield collate(windows, idx, ops)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        for idx, ops in plan:
            pending.append(pool.submit(collate, windows, idx, ops))
            if len(pending) > prefetch:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()
