"""Synthetic archives of advecting Gaussian blobs, one analogue per challenge variable.

Every sequence holds ``blobs`` Gaussians moving at ``velocity`` pixels per
frame (row, column). Start positions are drawn so that each centre stays at
least ``margin`` sigmas from the border for the whole sequence whenever the
geometry allows it. The four channels are derived from the summed field f:

* temperature          0.2 + 0.6 f (clipped), optional random missing pixels
* crr_intensity        2 max(f - 0.5, 0) (sparse, positive)
* asii_turb_trop_prob  f (clipped)
* cma                  1 where f >= 0.3 else 0
"""

from dataclasses import dataclass

import numpy as np

from .data import STATIC_NAMES, STEP_SECONDS, VARIABLES, FrameArchive


@dataclass
class SynthConfig:
    num_sequences: int = 8
    frames_per_sequence: int = 36
    size: int = 32
    blobs: int = 2
    velocity: tuple = (0.5, 0.75)
    sigma_range: tuple = (2.5, 4.0)
    amplitude_range: tuple = (0.6, 1.0)
    margin: float = 2.0
    missing_fraction: float = 0.0
    start_time: int = 1_600_000_000
    gap_steps: int = 4


def blob_field(size, centres, sigmas, amplitudes):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    f = np.zeros((size, size))
    for (cy, cx), s, a in zip(centres, sigmas, amplitudes):
        f += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return f


def static_channels(size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    elev = np.zeros((size, size))
    for _ in range(3):
        ky, kx = rng.uniform(1, 4, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        elev += np.sin(2 * np.pi * ky * yy + py) * np.cos(2 * np.pi * kx * xx + px)
    elev = (elev - elev.min()) / max(np.ptp(elev), 1e-12)
    lat = 1.0 - yy  # north at the top
    lon = xx
    return np.stack([elev, lat, lon]).astype(np.float32)


def _start_positions(rng, cfg, sigma):
    v = np.asarray(cfg.velocity, dtype=np.float64)
    travel = v * (cfg.frames_per_sequence - 1)
    pad = cfg.margin * sigma
    starts = []
    for axis in range(2):
        lo = pad - min(travel[axis], 0.0)
        hi = cfg.size - 1 - pad - max(travel[axis], 0.0)
        if hi < lo:
            lo, hi = 0.0, cfg.size - 1.0
        starts.append(rng.uniform(lo, hi))
    return np.array(starts)


def generate(cfg, seed=0):
    """Build a deterministic :class:`FrameArchive` from ``cfg`` and ``seed``."""
    if cfg.size < 1 or cfg.num_sequences < 1 or cfg.frames_per_sequence < 1:
        raise ValueError("synthetic geometry and counts must be positive")
    rng = np.random.default_rng(seed)
    n, t, size = cfg.num_sequences, cfg.frames_per_sequence, cfg.size
    frames = np.zeros((n * t, len(VARIABLES), size, size), dtype=np.float32)
    mask = np.ones_like(frames, dtype=np.uint8)
    timestamps = np.zeros(n * t, dtype=np.int64)
    v = np.asarray(cfg.velocity, dtype=np.float64)
    clock = cfg.start_time
    for s in range(n):
        sigmas = rng.uniform(*cfg.sigma_range, size=cfg.blobs)
        amps = rng.uniform(*cfg.amplitude_range, size=cfg.blobs)
        starts = [_start_positions(rng, cfg, sg) for sg in sigmas]
        for k in range(t):
            f = blob_field(size, [p + v * k for p in starts], sigmas, amps)
            i = s * t + k
            frames[i, 0] = np.clip(0.2 + 0.6 * f, 0, 1)
            frames[i, 1] = np.clip(2 * np.maximum(f - 0.5, 0), 0, 1)
            frames[i, 2] = np.clip(f, 0, 1)
            frames[i, 3] = f >= 0.3
            timestamps[i] = clock
            clock += STEP_SECONDS
        clock += cfg.gap_steps * STEP_SECONDS
    if cfg.missing_fraction > 0:
        missing = rng.random(frames[:, 0].shape) < cfg.missing_fraction
        mask[:, 0][missing] = 0
        frames[:, 0][missing] = 0.0
    return FrameArchive(
        frames=frames,
        valid_mask=mask,
        timestamps=timestamps,
        channel_names=list(VARIABLES),
        static=static_channels(size, rng),
        static_names=list(STATIC_NAMES),
    )
