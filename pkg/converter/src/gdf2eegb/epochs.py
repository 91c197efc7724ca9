"""Cue-relative epoch extraction with artifact bookkeeping."""

from dataclasses import dataclass, field

import numpy as np

from .gdf import GdfRecording

CODE_UNKNOWN_CUE = 783
CODE_ARTIFACT = 1023

# non-cue stream markers that carry no trial information here: trial start,
# idling/eye-task blocks, feedback period, eye movement annotations, new run
IGNORED_CODES = frozenset({768, 276, 277, 781, 1072, 1077, 1078, 1079, 1080, 1081, 32766})


class EpochError(ValueError):
    """Raised when a recording cannot be epoched as requested."""


@dataclass(frozen=True)
class EpochSpec:
    """Where trials live relative to their cue, and what the cues mean.

    t_start/t_end are seconds relative to the cue event; the epoch covers
    [t_start, t_end) so the sample count is (t_end - t_start) * fs exactly.
    channels is a whitelist of label prefixes.  label_map sends cue event
    codes to 0-based class indices.  Artifact marks within artifact_guard
    seconds before the cue (or anywhere inside the epoch) drop the trial.
    """

    t_start: float
    t_end: float
    channels: tuple
    label_map: dict
    artifact_guard: float = 3.0

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError(f"epoch window [{self.t_start}, {self.t_end}) is empty")
        if not self.label_map:
            raise ValueError("label map is empty")
        classes = sorted(set(self.label_map.values()))
        if classes != list(range(len(classes))):
            raise ValueError(f"class indices must be 0-based and contiguous, got {classes}")

    def n_samples(self, fs: float) -> int:
        return round((self.t_end - self.t_start) * fs)

    @property
    def n_classes(self) -> int:
        return len(set(self.label_map.values()))


@dataclass
class EpochBatch:
    trials: np.ndarray        # [m, C, T] float32
    labels: np.ndarray        # [m] int64
    electrode_names: list
    counts: dict = field(default_factory=dict)


def select_channels(rec: GdfRecording, prefixes) -> list:
    """Indices of channels whose label starts with a whitelisted prefix."""
    return [k for k, c in enumerate(rec.channels)
            if any(c.label.startswith(p) for p in prefixes)]


def extract_epochs(rec: GdfRecording, spec: EpochSpec, expected_fs: float = 250.0) -> EpochBatch:
    picks = select_channels(rec, spec.channels)
    if not picks:
        raise EpochError(f"missing channels: no label matches prefixes {spec.channels}")
    for k in picks:
        if abs(rec.channels[k].fs - expected_fs) > 1e-6:
            raise EpochError(
                f"channel {rec.channels[k].label!r} sampled at {rec.channels[k].fs:g} Hz, "
                f"expected {expected_fs:g}")

    ev = rec.events
    known = set(spec.label_map) | {CODE_UNKNOWN_CUE, CODE_ARTIFACT} | IGNORED_CODES
    for code in np.unique(ev.codes):
        if int(code) not in known and not code & 0x8000:  # high bit marks event ends
            raise EpochError(f"unknown event code {int(code)}")

    t = spec.n_samples(expected_fs)
    lead = round(spec.t_start * expected_fs)
    guard = round(spec.artifact_guard * expected_fs)
    art = [(int(p), int(p + max(d, 1)))
           for p, c, d in zip(ev.positions, ev.codes, ev.durations) if c == CODE_ARTIFACT]

    lengths = {rec.signals[k].size for k in picks}
    if len(lengths) != 1:
        raise EpochError(f"picked channels disagree in length: {sorted(lengths)}")
    data = np.stack([rec.signals[k] for k in picks])  # [C, N] float64
    n_avail = data.shape[1]
    trials, labels = [], []
    counts = {"kept": 0, "dropped_artifact": 0, "dropped_unlabeled": 0,
              "dropped_out_of_bounds": 0}
    for p, code in zip(ev.positions, ev.codes):
        code = int(code)
        is_cue = code in spec.label_map or code == CODE_UNKNOWN_CUE
        if not is_cue:
            continue
        start = int(p) + lead
        if start < 0 or start + t > n_avail:
            counts["dropped_out_of_bounds"] += 1
            continue
        lo, hi = int(p) - guard, start + t
        if any(a < hi and b > lo for a, b in art):
            counts["dropped_artifact"] += 1
            continue
        if code == CODE_UNKNOWN_CUE:
            counts["dropped_unlabeled"] += 1
            continue
        trials.append(data[:, start:start + t])
        labels.append(spec.label_map[code])
        counts["kept"] += 1

    names = [rec.channels[k].label for k in picks]
    if not trials:
        out = np.zeros((0, len(picks), t), dtype=np.float32)
        return EpochBatch(out, np.zeros(0, dtype=np.int64), names, counts)
    return EpochBatch(np.stack(trials).astype(np.float32),
                      np.asarray(labels, dtype=np.int64), names, counts)
