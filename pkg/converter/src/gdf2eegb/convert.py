"""Dataset conventions and the GDF-to-container pipeline.

The 2a protocol records nine subjects doing four motor imagery tasks over
22 EEG electrodes (plus three EOG channels we exclude), one training and
one evaluation session per subject.  The 2b protocol uses three bipolar
EEG channels and two tasks over five sessions: the first three train,
the last two evaluate.  Both sample at 250 Hz with the cue codes below.
"""

from dataclasses import dataclass

import numpy as np

from .container import write_container
from .epochs import EpochError, EpochSpec, extract_epochs
from .gdf import read_gdf


class ConversionError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetRules:
    name: str
    epoch_spec: EpochSpec
    n_channels: int
    class_names: tuple

    def train_files(self, subject):
        raise NotImplementedError

    def eval_files(self, subject):
        raise NotImplementedError


class _Rules2a(DatasetRules):
    def train_files(self, subject):
        return [f"A{subject:02d}T.gdf"]

    def eval_files(self, subject):
        return [f"A{subject:02d}E.gdf"]


class _Rules2b(DatasetRules):
    def train_files(self, subject):
        return [f"B{subject:02d}{s:02d}T.gdf" for s in (1, 2, 3)]

    def eval_files(self, subject):
        return [f"B{subject:02d}{s:02d}E.gdf" for s in (4, 5)]


# cues sit 2 s (2a) or 3 s (2b) into the trial; epochs are cue-relative
# [-0.5, 4.0) s, i.e. 1125 samples at 250 Hz
RULES = {
    "2a": _Rules2a(
        name="2a",
        epoch_spec=EpochSpec(-0.5, 4.0, ("EEG",),
                             {769: 0, 770: 1, 771: 2, 772: 3}),
        n_channels=22,
        class_names=("left hand", "right hand", "feet", "tongue"),
    ),
    "2b": _Rules2b(
        name="2b",
        epoch_spec=EpochSpec(-0.5, 4.0, ("EEG",), {769: 0, 770: 1}),
        n_channels=3,
        class_names=("left hand", "right hand"),
    ),
}


def convert(gdf_paths, spec: EpochSpec, out_path, *, expected_channels,
            class_names, subject, fs=250.0) -> dict:
    """Epoch one or more recordings into a single container at out_path.

    Returns a report dict with per-file kept/dropped counts.  Aborts
    without writing anything when a recording is malformed, a channel is
    missing, or an event code is unrecognized.
    """
    batches = []
    file_reports = []
    names = None
    for path in gdf_paths:
        rec = read_gdf(path)
        try:
            batch = extract_epochs(rec, spec, expected_fs=fs)
        except EpochError as e:
            raise ConversionError(f"{path}: {e}") from None
        if len(batch.electrode_names) != expected_channels:
            raise ConversionError(
                f"{path}: missing channels: found {len(batch.electrode_names)} "
                f"matching {spec.channels}, expected {expected_channels}")
        if names is None:
            names = batch.electrode_names
        elif names != batch.electrode_names:
            raise ConversionError(
                f"{path}: electrode order {batch.electrode_names} disagrees "
                f"with earlier session {names}")
        batches.append(batch)
        file_reports.append({"file": str(path), **batch.counts})

    trials = np.concatenate([b.trials for b in batches])
    labels = np.concatenate([b.labels for b in batches])
    if trials.shape[0] == 0:
        dropped = sum(r["dropped_unlabeled"] + r["dropped_artifact"] for r in file_reports)
        raise ConversionError(
            f"no labeled trials survived ({dropped} dropped); are these "
            f"cue-labeled recordings?")

    write_container(out_path, trials, labels, subject=subject, fs=fs,
                    class_names=list(class_names), electrode_names=names)
    per_class = np.bincount(labels, minlength=len(class_names))
    return {
        "output": str(out_path),
        "subject": subject,
        "trials": int(trials.shape[0]),
        "per_class": {cls: int(n) for cls, n in zip(class_names, per_class)},
        "electrodes": names,
        "files": file_reports,
        "dropped_artifact": sum(r["dropped_artifact"] for r in file_reports),
        "dropped_unlabeled": sum(r["dropped_unlabeled"] for r in file_reports),
        "dropped_out_of_bounds": sum(r["dropped_out_of_bounds"] for r in file_reports),
    }
