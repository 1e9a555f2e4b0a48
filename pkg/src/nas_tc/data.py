"""Feature-file ingestion and the synthetic temporal-motif benchmark.

Real backbone features arrive as NTCF containers (the backbone itself is an
external preprocessing step).  The synthetic generator plants class-specific
periodic bump trains into noise so that label identity is carried purely by
temporal structure: a class's channels always receive the same number of
bumps, laid out periodically when the class is active and scattered at
random positions when it is not.  Channel-mean statistics therefore match
across labels and only temporal patterns separate the classes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError

FEATURES_MAGIC = b"NTCF"
FEATURES_VERSION = 1

LABEL_MODES = ("multi-label", "single-label")


@dataclass
class Dataset:
    """In-memory feature dataset: ids, rank-4 features per record, labels."""

    ids: list[str]
    features: np.ndarray          # (n, C, T, H, W) float32
    labels: np.ndarray            # (n, K) uint8, one-hot when single-label
    label_mode: str = "multi-label"

    def __post_init__(self):
        if self.label_mode not in LABEL_MODES:
            raise ConfigurationError(f"unknown label mode {self.label_mode!r}")
        if self.features.ndim != 5 or self.labels.ndim != 2:
            raise ConfigurationError(
                f"features must be (n, C, T, H, W) and labels (n, K); got "
                f"{self.features.shape} / {self.labels.shape}")
        if not (len(self.ids) == len(self.features) == len(self.labels)):
            raise ConfigurationError("ids, features and labels disagree on count")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.features.shape[1:]

    @property
    def classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = list(indices)
        return Dataset([self.ids[i] for i in idx], self.features[idx],
                       self.labels[idx], self.label_mode)


@dataclass(frozen=True)
class Motif:
    """A periodic bump train on a set of channels."""

    channels: tuple[int, ...]
    period: int
    duration: int = 1
    amplitude: float = 1.0

    def validate(self, c: int, t: int) -> None:
        if self.period < 2:
            raise ConfigurationError(f"motif period {self.period} must be >= 2")
        if not 1 <= self.duration <= t:
            raise ConfigurationError(
                f"motif duration {self.duration} outside [1, T={t}]")
        if self.duration >= self.period:
            raise ConfigurationError(
                f"motif duration {self.duration} must be below period {self.period}")
        for ch in self.channels:
            if not 0 <= ch < c:
                raise ConfigurationError(f"motif channel {ch} outside [0, {c})")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the planted-motif generator."""

    classes: int = 4
    samples: int = 500
    channels: int = 16
    timesteps: int = 32
    height: int = 1
    width: int = 1
    overlap: float = 0.25       # chance each non-primary class is also active
    noise: float = 0.6
    amplitude: float = 1.0
    periods: tuple[int, ...] = (2, 3, 4, 6)
    duration: int = 1
    seed: int = 0

    def motifs(self) -> list[Motif]:
        """Default library: one motif per class on its own channel block."""
        if self.classes < 1 or self.samples < 1:
            raise ConfigurationError("classes and samples must be positive")
        if len(self.periods) != self.classes:
            raise ConfigurationError(
                f"{len(self.periods)} periods for {self.classes} classes")
        if self.channels % self.classes != 0:
            raise ConfigurationError(
                f"channels {self.channels} not divisible by classes {self.classes}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigurationError(f"overlap {self.overlap} outside [0, 1]")
        block = self.channels // self.classes
        motifs = []
        for k in range(self.classes):
            m = Motif(tuple(range(k * block, (k + 1) * block)),
                      self.periods[k], self.duration, self.amplitude)
            m.validate(self.channels, self.timesteps)
            motifs.append(m)
        return motifs


def _bump_starts_periodic(rng: np.random.Generator, motif: Motif,
                          t: int) -> np.ndarray:
    onset = int(rng.integers(motif.period))
    return np.arange(onset, t, motif.period)


def _render(x: np.ndarray, motif: Motif, starts: np.ndarray, t: int) -> None:
    for s in starts:
        stop = min(s + motif.duration, t)
        for ch in motif.channels:
            x[ch, s:stop] += motif.amplitude


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Deterministic per seed; labels are multi-label binary vectors."""
    motifs = spec.motifs()
    c, t = spec.channels, spec.timesteps
    n = spec.samples
    features = np.zeros((n, c, t, spec.height, spec.width), dtype=np.float32)
    labels = np.zeros((n, spec.classes), dtype=np.uint8)
    ids = [f"synth-{i:05d}" for i in range(n)]
    streams = np.random.SeedSequence(spec.seed).spawn(n)
    for i in range(n):
        rng = np.random.default_rng(streams[i])
        primary = i % spec.classes
        active = {primary}
        for k in range(spec.classes):
            if k != primary and rng.random() < spec.overlap:
                active.add(k)
        plane = rng.standard_normal((c, t)) * spec.noise
        for k, motif in enumerate(motifs):
            starts = _bump_starts_periodic(rng, motif, t)
            if k in active:
                _render(plane, motif, starts, t)
            else:
                # same bump count, scattered: temporal order is the only cue
                scattered = rng.choice(t, size=len(starts), replace=False)
                _render(plane, motif, np.sort(scattered), t)
        features[i] = plane[:, :, None, None]
        labels[i, sorted(active)] = 1
    return Dataset(ids, features, labels, "multi-label")


# ---------------------------------------------------------------------------
# NTCF container
# ---------------------------------------------------------------------------

def write_features(path: str, dataset: Dataset) -> None:
    n, c, t, h, w = dataset.features.shape
    k = dataset.classes
    mode = LABEL_MODES.index(dataset.label_mode)
    with open(path, "wb") as f:
        f.write(FEATURES_MAGIC)
        f.write(struct.pack("<I", FEATURES_VERSION))
        f.write(struct.pack("<6IB", n, c, t, h, w, k, mode))
        for i in range(n):
            ident = dataset.ids[i].encode("utf-8")
            f.write(struct.pack("<H", len(ident)))
            f.write(ident)
            f.write(dataset.features[i].astype("<f4").tobytes())
            f.write(dataset.labels[i].astype(np.uint8).tobytes())


def load_features(path: str) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal off
        if off + nbytes > len(blob):
            raise FormatError(
                f"truncated feature file: needed {nbytes} bytes for {what}, "
                f"have {len(blob) - off}", offset=off)
        piece = blob[off: off + nbytes]
        off += nbytes
        return piece

    if take(4, "magic") != FEATURES_MAGIC:
        raise FormatError("bad magic, not an NTCF feature file", offset=0)
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != FEATURES_VERSION:
        raise FormatError(f"unsupported NTCF version {version}", offset=4)
    n, c, t, h, w, k, mode = struct.unpack("<6IB", take(25, "header"))
    if mode >= len(LABEL_MODES):
        raise FormatError(f"unknown label mode {mode}", offset=off - 1)
    feat_bytes = 4 * c * t * h * w
    ids, features, labels = [], [], []
    for i in range(n):
        (id_len,) = struct.unpack("<H", take(2, f"id length of record {i}"))
        ids.append(take(id_len, f"id of record {i}").decode("utf-8"))
        values = np.frombuffer(
            take(feat_bytes, f"features of record {i}"), dtype="<f4")
        features.append(values.reshape(c, t, h, w))
        labels.append(np.frombuffer(take(k, f"labels of record {i}"),
                                    dtype=np.uint8).copy())
    if off != len(blob):
        raise FormatError(
            f"{len(blob) - off} trailing bytes after {n} records", offset=off)
    return Dataset(ids, np.stack(features) if n else
                   np.zeros((0, c, t, h, w), np.float32),
                   np.stack(labels) if n else np.zeros((0, k), np.uint8),
                   LABEL_MODES[mode])


# ---------------------------------------------------------------------------
# frame segmentation for external feature extraction
# ---------------------------------------------------------------------------

def segment_video_frames(t_frames: int, timesteps: int) -> list[tuple[int, int]]:
    """Index ranges of one 8-frame superframe per segment.

    The video is cut into ``timesteps`` equal segments (leftover frames are
    split evenly at both ends) and the 8 consecutive frames centered in each
    segment are selected.
    """
    window = 8
    if timesteps < 1:
        raise ConfigurationError("timesteps must be positive")
    if t_frames < window * timesteps:
        raise ConfigurationError(
            f"video of {t_frames} frames too short for {timesteps} segments "
            f"of {window} frames")
    seg = t_frames // timesteps
    lead = (t_frames - seg * timesteps) // 2
    offset = (seg - window) // 2
    return [(lead + i * seg + offset, lead + i * seg + offset + window)
            for i in range(timesteps)]
