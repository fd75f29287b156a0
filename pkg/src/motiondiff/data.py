"""Synthetic motion data, (history, future) windowing and the ``SMDM1`` container.

Container layout (little-endian)::

    b"SMDM1"                      magic + format version
    float64  fps
    uint32   V
    uint32   sequence count
    per sequence:
        uint32   frame count
        float64  frames * V * 3 coordinates, frame-major then joint then axis

Units are meters; the synthetic generator runs at 25 fps by default.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    SequenceTooShort,
    ShapeInconsistent,
    TruncatedFile,
    VersionMismatch,
)
from .skeleton import Skeleton, canonical_skeleton

MAGIC = b"SMDM"
VERSION = b"1"

# canonical 17-joint rest pose (meters, y up); see resources/h36m17.skel for joint order
CANONICAL_REST_POSE = np.array(
    [
        [0.00, 0.95, 0.00],
        [-0.13, 0.95, 0.00],
        [-0.13, 0.52, 0.02],
        [-0.13, 0.08, 0.00],
        [0.13, 0.95, 0.00],
        [0.13, 0.52, 0.02],
        [0.13, 0.08, 0.00],
        [0.00, 1.18, 0.00],
        [0.00, 1.45, 0.00],
        [0.00, 1.55, 0.02],
        [0.00, 1.68, 0.00],
        [0.17, 1.42, 0.00],
        [0.20, 1.15, 0.00],
        [0.22, 0.90, 0.02],
        [-0.17, 1.42, 0.00],
        [-0.20, 1.15, 0.00],
        [-0.22, 0.90, 0.02],
    ]
)


@dataclass
class MotionDataset:
    fps: float
    sequences: list[np.ndarray]
    splits: list[str] = field(default_factory=list)
    skeleton: Skeleton | None = None

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.sequences)
        if len(self.splits) != len(self.sequences):
            raise ShapeInconsistent("one split label per sequence required")
        V = self.V
        for i, s in enumerate(self.sequences):
            if s.ndim != 3 or s.shape[1:] != (V, 3):
                raise ShapeInconsistent(f"sequence {i} has shape {s.shape}, expected (T, {V}, 3)")
            if not np.all(np.isfinite(s)):
                raise ShapeInconsistent(f"sequence {i} has non-finite coordinates")
        if self.skeleton is not None and self.skeleton.V != V:
            raise ShapeInconsistent(f"skeleton has {self.skeleton.V} joints, data has {V}")

    @property
    def V(self) -> int:
        if self.sequences:
            return self.sequences[0].shape[1]
        return self.skeleton.V if self.skeleton is not None else 0

    def with_split(self, test_fraction: float) -> MotionDataset:
        """Label the last ``ceil(test_fraction * n)`` sequences as test."""
        n = len(self.sequences)
        n_test = math.ceil(test_fraction * n) if test_fraction > 0 else 0
        splits = ["train"] * (n - n_test) + ["test"] * n_test
        return MotionDataset(self.fps, self.sequences, splits, self.skeleton)

    def subset(self, split: str) -> list[np.ndarray]:
        return [s for s, lab in zip(self.sequences, self.splits) if lab == split]

    def equals(self, other: MotionDataset) -> bool:
        return (
            self.fps == other.fps
            and len(self.sequences) == len(other.sequences)
            and all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.sequences, other.sequences))
        )


@dataclass(frozen=True)
class SyntheticConfig:
    num_sequences: int = 80
    frames: int = 250
    fps: float = 25.0
    families: tuple[str, ...] = ("sinusoidal", "drift", "gait")
    amplitude: tuple[float, float] = (0.01, 0.08)
    frequency: tuple[float, float] = (0.2, 1.2)
    max_sinusoids: int = 3
    gait_amplitude: tuple[float, float] = (0.05, 0.2)
    drift_amplitude: tuple[float, float] = (0.0, 0.3)
    drift_frequency: tuple[float, float] = (0.02, 0.15)
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.families) - {"sinusoidal", "drift", "gait"}
        if unknown:
            raise ValueError(f"unknown motion families {sorted(unknown)}")
        for name in ("amplitude", "frequency", "gait_amplitude", "drift_amplitude", "drift_frequency"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi")
        if self.num_sequences < 0 or self.frames < 1 or self.fps <= 0 or self.max_sinusoids < 1:
            raise ValueError("num_sequences, frames, fps and max_sinusoids must be positive")


def rest_pose(skeleton: Skeleton, seed: int = 0) -> np.ndarray:
    """Rest pose for ``skeleton``: the canonical one for 17 joints, else random 0.2 m bones."""
    if skeleton.V == 17 and skeleton.parent == canonical_skeleton().parent:
        return CANONICAL_REST_POSE.copy()
    rng = np.random.default_rng(seed)
    pose = np.zeros((skeleton.V, 3))
    stack = [skeleton.root]
    while stack:
        u = stack.pop()
        for w in skeleton.children[u]:
            d = rng.normal(size=3)
            pose[w] = pose[u] + 0.2 * d / np.linalg.norm(d)
            stack.append(w)
    return pose


def _limb_phases(skeleton: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint gait phase (0 or pi, constant along each limb) and depth-scaled weight."""
    if skeleton.V == 17 and skeleton.parent == canonical_skeleton().parent:
        phase = np.zeros(17)
        weight = np.zeros(17)
        for chain, ph in (((1, 2, 3), 0.0), ((4, 5, 6), np.pi), ((11, 12, 13), 0.0), ((14, 15, 16), np.pi)):
            for depth, j in enumerate(chain, 1):
                phase[j] = ph
                weight[j] = depth / len(chain)
        return phase, weight
    phase = np.zeros(skeleton.V)
    depth = np.zeros(skeleton.V)
    for i, c in enumerate(skeleton.children[skeleton.root]):
        stack = [(c, 1)]
        while stack:
            u, d = stack.pop()
            phase[u] = np.pi * (i % 2)
            depth[u] = d
            stack.extend((w, d + 1) for w in skeleton.children[u])
    weight = depth / max(depth.max(), 1.0)
    return phase, weight


def generate_synthetic(cfg: SyntheticConfig, skeleton: Skeleton | None = None) -> MotionDataset:
    """Smooth synthetic motion: rest pose + per-joint sinusoids + gait swing + global drift.

    Every sequence draws from its own RNG stream ``(seed, index)``.
    """
    skeleton = skeleton or canonical_skeleton()
    base = rest_pose(skeleton, cfg.seed)
    phase, weight = _limb_phases(skeleton)
    V = skeleton.V
    t = np.arange(cfg.frames) / cfg.fps
    seqs = []
    for i in range(cfg.num_sequences):
        rng = np.random.default_rng([cfg.seed, i])
        pose = base * rng.uniform(0.9, 1.1)
        motion = np.repeat(pose[None], cfg.frames, axis=0)
        if "sinusoidal" in cfg.families:
            counts = rng.integers(1, cfg.max_sinusoids + 1, size=V)
            for v in range(V):
                for _ in range(counts[v]):
                    a = rng.uniform(*cfg.amplitude)
                    f = rng.uniform(*cfg.frequency)
                    ph = rng.uniform(0, 2 * np.pi)
                    d = rng.normal(size=3)
                    d /= np.linalg.norm(d)
                    motion[:, v] += a * np.sin(2 * np.pi * f * t + ph)[:, None] * d[None]
        if "gait" in cfg.families:
            a = rng.uniform(*cfg.gait_amplitude)
            f = rng.uniform(*cfg.frequency)
            ph0 = rng.uniform(0, 2 * np.pi)
            swing = np.sin(2 * np.pi * f * t[:, None] + ph0 + phase[None]) * (a * weight)[None]
            motion[:, :, 2] += swing
        if "drift" in cfg.families:
            for axis in (0, 2):
                a = rng.uniform(*cfg.drift_amplitude)
                f = rng.uniform(*cfg.drift_frequency)
                ph = rng.uniform(0, 2 * np.pi)
                motion[:, :, axis] += (a * (np.sin(2 * np.pi * f * t + ph) - np.sin(ph)))[:, None]
        seqs.append(motion)
    return MotionDataset(cfg.fps, seqs, skeleton=skeleton)


def displacement_bound(cfg: SyntheticConfig) -> float:
    """Upper bound on any joint's per-frame displacement (``|sin a - sin b| <= |a - b|``)."""
    step = 2 * np.pi / cfg.fps
    bound = 0.0
    if "sinusoidal" in cfg.families:
        bound += cfg.max_sinusoids * cfg.amplitude[1] * cfg.frequency[1] * step
    if "gait" in cfg.families:
        bound += cfg.gait_amplitude[1] * cfg.frequency[1] * step
    if "drift" in cfg.families:
        bound += math.sqrt(2) * cfg.drift_amplitude[1] * cfg.drift_frequency[1] * step
    return bound


def window_count(length: int, H: int, F: int, stride: int) -> int:
    return (length - H - F) // stride + 1 if length >= H + F else 0


def window(dataset: MotionDataset, H: int, F: int, stride: int, split: str | None = None):
    """Sliding ``(history, full motion)`` pairs; ``full`` has ``H + F`` frames."""
    if stride < 1 or H < 1 or F < 0:
        raise ValueError("H and stride must be positive and F non-negative")
    seqs = dataset.sequences if split is None else dataset.subset(split)
    if not seqs:
        return []
    shortest = min(len(s) for s in seqs)
    if shortest < H + F:
        raise SequenceTooShort(f"sequence of {shortest} frames cannot hold H + F = {H + F}")
    pairs = []
    for s in seqs:
        for lo in range(0, len(s) - H - F + 1, stride):
            full = s[lo : lo + H + F]
            pairs.append((full[:H], full))
    return pairs


def window_array(dataset: MotionDataset, H: int, F: int, stride: int, split: str | None = None) -> np.ndarray:
    pairs = window(dataset, H, F, stride, split)
    if not pairs:
        return np.zeros((0, H + F, dataset.V, 3))
    return np.stack([full for _, full in pairs])


def encode_container(ds: MotionDataset) -> bytes:
    chunks = [MAGIC + VERSION, struct.pack("<dII", float(ds.fps), ds.V, len(ds.sequences))]
    for s in ds.sequences:
        chunks.append(struct.pack("<I", s.shape[0]))
        chunks.append(np.ascontiguousarray(s, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_container(blob: bytes, skeleton: Skeleton | None = None) -> MotionDataset:
    if len(blob) < 5 or blob[:4] != MAGIC:
        raise BadMagic(f"not a motion container (magic {blob[:5]!r})")
    if blob[4:5] != VERSION:
        raise VersionMismatch(f"container version {blob[4:5]!r}, this reader supports {VERSION!r}")
    pos = 5

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFile(f"needed {n} bytes, {len(blob) - pos} remain", pos)
        out = blob[pos : pos + n]
        pos += n
        return out

    fps, V, count = struct.unpack("<dII", take(16))
    if V == 0 or not fps > 0:
        raise ShapeInconsistent(f"invalid header: fps={fps}, V={V}")
    seqs = []
    for _ in range(count):
        (frames,) = struct.unpack("<I", take(4))
        raw = take(8 * frames * V * 3)
        seqs.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(frames, V, 3))
    if pos != len(blob):
        raise ShapeInconsistent(f"{len(blob) - pos} trailing bytes after the last sequence")
    if skeleton is not None and skeleton.V != V:
        raise ShapeInconsistent(f"container has {V} joints, skeleton has {skeleton.V}")
    return MotionDataset(fps, seqs, skeleton=skeleton)


def write_container(ds: MotionDataset, path: str | Path) -> None:
    Path(path).write_bytes(encode_container(ds))


def read_container(path: str | Path, skeleton: Skeleton | None = None) -> MotionDataset:
    return decode_container(Path(path).read_bytes(), skeleton)


def to_csv(ds: MotionDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seq", "frame", "joint", "x", "y", "z"])
    for i, s in enumerate(ds.sequences):
        for f in range(s.shape[0]):
            for j in range(s.shape[1]):
                w.writerow([i, f, j, *(repr(float(c)) for c in s[f, j])])
    return buf.getvalue()
