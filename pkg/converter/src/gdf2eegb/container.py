"""EEGB v1 container writer.

Deliberately self-contained: this package only produces the container
bytes, it never links against the consumer.  Layout, little-endian
throughout: magic "EEGB", u16 version, u32 trial count, u32 channels,
u32 samples, u16 class count, u32 sampling rate in millihertz, u32
metadata length plus UTF-8 JSON (subject, class_names, electrode_names),
then trial labels as u16 and trial data as float32, row-major.
"""

import io
import json
import struct

import numpy as np

MAGIC = b"EEGB"
VERSION = 1


def container_bytes(trials, labels, *, subject, fs, class_names, electrode_names) -> bytes:
    trials = np.ascontiguousarray(trials, dtype="<f4")
    labels = np.asarray(labels)
    if trials.ndim != 3:
        raise ValueError(f"trials must be [m, C, T], got shape {trials.shape}")
    m, c, t = trials.shape
    if labels.shape != (m,):
        raise ValueError(f"need {m} labels, got shape {labels.shape}")
    if m and (labels.min() < 0 or labels.max() >= len(class_names)):
        raise ValueError("labels fall outside the class list")
    if len(electrode_names) != c:
        raise ValueError(f"need {c} electrode names, got {len(electrode_names)}")

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<III", m, c, t))
    buf.write(struct.pack("<H", len(class_names)))
    buf.write(struct.pack("<I", round(fs * 1000)))
    meta = json.dumps({
        "subject": subject,
        "class_names": list(class_names),
        "electrode_names": list(electrode_names),
    }, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(labels.astype("<u2").tobytes())
    buf.write(trials.tobytes())
    return buf.getvalue()


def write_container(path, trials, labels, **meta) -> None:
    with open(path, "wb") as f:
        f.write(container_bytes(trials, labels, **meta))
