"""Trial containers, per-electrode standardization, and synthetic data.

A TrialSet holds raw or standardized trials of shape [m, C, T] plus labels
and recording metadata.  Standardization statistics are always fitted on the
training set and applied unchanged to evaluation data, so evaluation trials
never leak their own statistics into the transform.

The on-disk container ("EEGB", version 1) is a flat little-endian layout:
magic, version, the three extents, class count, sampling rate in millihertz,
a JSON metadata blob, u16 labels, then float32 trial data in (trial,
electrode, sample) order.
"""

from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

CONTAINER_MAGIC = b"EEGB"
CONTAINER_VERSION = 1

SIGMA_FLOOR = 1e-8


class ContainerFormatError(ValueError):
    """The byte stream is not a readable container."""


class BadMagicError(ContainerFormatError):
    """Leading bytes are not the container magic."""


class UnsupportedVersionError(ContainerFormatError):
    """Recognized container, unknown version."""


class TruncatedPayloadError(ContainerFormatError):
    """The stream ends before the declared payload does."""


@dataclass
class TrialSet:
    """Trials [m, C, T] with labels and recording metadata.

    Arrays are frozen on construction; transforms return new sets.
    """

    trials: np.ndarray
    labels: np.ndarray
    subject: str = "unknown"
    fs: float = 250.0
    class_names: list = field(default_factory=list)
    electrode_names: list = field(default_factory=list)

    def __post_init__(self):
        self.trials = np.ascontiguousarray(self.trials, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.trials.ndim != 3:
            raise ValueError(f"trials must be [m, C, T], got shape {self.trials.shape}")
        if self.labels.ndim != 1 or len(self.labels) != self.trials.shape[0]:
            raise ValueError(
                f"need one label per trial: {len(self.labels)} labels for {self.trials.shape[0]} trials")
        if not self.class_names:
            top = int(self.labels.max()) + 1 if len(self.labels) else 2
            self.class_names = [f"class{i}" for i in range(top)]
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError(
                f"labels must lie in [0, {len(self.class_names)}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]")
        if not self.electrode_names:
            self.electrode_names = [f"ch{i:02d}" for i in range(self.trials.shape[1])]
        if len(self.electrode_names) != self.trials.shape[1]:
            raise ValueError(
                f"{len(self.electrode_names)} electrode names for {self.trials.shape[1]} electrodes")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        self.trials.flags.writeable = False
        self.labels.flags.writeable = False

    @property
    def m(self):
        return self.trials.shape[0]

    @property
    def n_channels(self):
        return self.trials.shape[1]

    @property
    def n_samples(self):
        return self.trials.shape[2]

    @property
    def n_classes(self):
        return len(self.class_names)

    def subset(self, indices) -> "TrialSet":
        indices = np.asarray(indices)
        if indices.dtype != bool:
            indices = indices.astype(np.int64)
        return TrialSet(self.trials[indices], self.labels[indices], subject=self.subject,
                        fs=self.fs, class_names=list(self.class_names),
                        electrode_names=list(self.electrode_names))


@dataclass
class Standardizer:
    """Per-electrode location/scale fitted on training data only."""

    mu: np.ndarray
    sigma: np.ndarray


def fit_standardizer(train: TrialSet) -> Standardizer:
    """Mean and standard deviation per electrode, pooled over every training
    trial and sample.  Electrodes with vanishing spread are clamped to a
    floor and reported, not dropped."""
    if train.m < 1:
        raise ValueError("cannot fit a standardizer on an empty set")
    mu = train.trials.mean(axis=(0, 2)).astype(np.float64)
    sigma = train.trials.std(axis=(0, 2)).astype(np.float64)
    low = sigma < SIGMA_FLOOR
    if low.any():
        bad = [train.electrode_names[i] for i in np.flatnonzero(low)]
        warnings.warn(f"degenerate electrodes (no spread), clamping sigma: {bad}")
        sigma = np.where(low, SIGMA_FLOOR, sigma)
    return Standardizer(mu=mu, sigma=sigma)


def apply_standardizer(std: Standardizer, data: TrialSet) -> TrialSet:
    if len(std.mu) != data.n_channels:
        raise ValueError(
            f"standardizer fitted on {len(std.mu)} electrodes, data has {data.n_channels}")
    scaled = (data.trials - std.mu[None, :, None]) / std.sigma[None, :, None]
    return TrialSet(scaled.astype(np.float32), data.labels, subject=data.subject, fs=data.fs,
                    class_names=list(data.class_names), electrode_names=list(data.electrode_names))


# ---------------------------------------------------------------------------
# container i/o


def save_container(ts: TrialSet, path) -> None:
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack("<H", CONTAINER_VERSION))
    buf.write(struct.pack("<III", ts.m, ts.n_channels, ts.n_samples))
    buf.write(struct.pack("<H", ts.n_classes))
    buf.write(struct.pack("<I", round(ts.fs * 1000)))
    meta = json.dumps({
        "subject": ts.subject,
        "class_names": list(ts.class_names),
        "electrode_names": list(ts.electrode_names),
    }, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    if ts.m and ts.labels.max() >= 1 << 16:
        raise ValueError("labels exceed the u16 range of the container format")
    buf.write(ts.labels.astype("<u2").tobytes())
    buf.write(np.ascontiguousarray(ts.trials, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_container(path) -> TrialSet:
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)

    def take(n, what):
        b = buf.read(n)
        if len(b) != n:
            raise TruncatedPayloadError(f"truncated payload while reading {what}")
        return b

    if take(4, "magic") != CONTAINER_MAGIC:
        raise BadMagicError("bad magic: not an EEGB container")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CONTAINER_VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    m, c, t = struct.unpack("<III", take(12, "extents"))
    (n_classes,) = struct.unpack("<H", take(2, "class count"))
    (fs_millihertz,) = struct.unpack("<I", take(4, "sampling rate"))
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    labels = np.frombuffer(take(2 * m, "labels"), dtype="<u2").astype(np.int64)
    data = np.frombuffer(take(4 * m * c * t, "trial data"), dtype="<f4").reshape(m, c, t)
    if buf.read(1):
        raise ContainerFormatError("trailing bytes after declared payload")
    class_names = meta.get("class_names") or [f"class{i}" for i in range(n_classes)]
    if len(class_names) != n_classes:
        raise ContainerFormatError(
            f"metadata lists {len(class_names)} classes, header says {n_classes}")
    return TrialSet(
        data, labels, subject=str(meta.get("subject", "unknown")), fs=fs_millihertz / 1000.0,
        class_names=class_names, electrode_names=meta.get("electrode_names") or [])


# ---------------------------------------------------------------------------
# synthetic trials


def synthesize(classes: int, m_per_class: int, C: int, T: int, seed: int,
               fs: float = 250.0, noise: float = 0.5) -> TrialSet:
    """Separable-by-construction trials: each class is a Hann-windowed burst
    at its own frequency (6 + 7c Hz), mixed across electrodes with random
    gains, plus white noise.  Deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([0xDA7A, seed]))
    t = np.arange(T) / fs
    envelope = np.hanning(T)
    trials = np.empty((classes * m_per_class, C, T), dtype=np.float32)
    labels = np.empty(classes * m_per_class, dtype=np.int64)
    i = 0
    for c in range(classes):
        freq = 6.0 + 7.0 * c
        for _ in range(m_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            gains = rng.uniform(0.5, 1.5, size=C)
            burst = np.sin(2 * np.pi * freq * t + phase) * envelope
            trials[i] = gains[:, None] * burst[None, :] + rng.normal(0.0, noise, size=(C, T))
            labels[i] = c
            i += 1
    order = rng.permutation(len(labels))
    return TrialSet(trials[order], labels[order], subject="synthetic", fs=fs,
                    class_names=[f"class{c}" for c in range(classes)])


def split_trials(ts: TrialSet, eval_fraction: float, seed: int):
    """Stratified train/eval split; every class contributes the same
    fraction (rounded down, at least one trial stays in train)."""
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError(f"eval fraction must be in (0, 1), got {eval_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([0x5B117, seed]))
    eval_idx = []
    for c in range(ts.n_classes):
        members = np.flatnonzero(ts.labels == c)
        rng.shuffle(members)
        k = min(int(len(members) * eval_fraction), max(len(members) - 1, 0))
        eval_idx.extend(members[:k])
    eval_mask = np.zeros(ts.m, dtype=bool)
    eval_mask[eval_idx] = True
    return ts.subset(np.flatnonzero(~eval_mask)), ts.subset(np.flatnonzero(eval_mask))
