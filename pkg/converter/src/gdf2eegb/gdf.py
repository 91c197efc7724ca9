"""Minimal GDF reader covering what motor-imagery recordings need.

Handles GDF 1.x and 2.x fixed headers, int16 and float32 sample types,
digital-to-physical scaling, and mode 1/3 event tables.  Everything is
parsed from explicit byte offsets; no attempt is made at the optional
tag-length-value header section beyond skipping it.
"""

from dataclasses import dataclass

import numpy as np
import struct

# sample type codes actually used by the supported recordings
GDFTYP_INT16 = 3
GDFTYP_FLOAT32 = 16
_SAMPLE_DTYPES = {GDFTYP_INT16: "<i2", GDFTYP_FLOAT32: "<f4"}


class GdfError(ValueError):
    """Raised for structurally invalid or unsupported GDF input."""


@dataclass(frozen=True)
class GdfChannel:
    label: str
    physmin: float
    physmax: float
    digmin: float
    digmax: float
    samples_per_record: int
    sample_type: int
    fs: float


@dataclass(frozen=True)
class GdfEvents:
    mode: int
    fs: float
    positions: np.ndarray  # 0-based sample index, int64
    codes: np.ndarray      # u16 event type codes
    channels: np.ndarray   # 0 = all channels; only meaningful for mode 3
    durations: np.ndarray  # samples; zeros for mode 1

    def __len__(self):
        return self.positions.size


@dataclass(frozen=True)
class GdfRecording:
    version: float
    fs: float
    channels: tuple
    signals: tuple  # per channel, float64 physical values, full recording
    events: GdfEvents

    @property
    def n_samples(self):
        return self.signals[0].size if self.signals else 0


def _strz(b: bytes) -> str:
    return b.decode("ascii", "replace").rstrip("\x00 ")


def read_gdf(path) -> GdfRecording:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 256:
        raise GdfError("truncated fixed header")
    tag = _strz(raw[0:8])
    if not tag.startswith("GDF"):
        raise GdfError(f"not a GDF file: version tag {tag!r}")
    try:
        version = float(tag[3:].strip())
    except ValueError:
        raise GdfError(f"unparseable GDF version {tag!r}") from None

    # fixed header: record count, record duration and signal count sit at the
    # same offsets in both generations; the header length encoding differs
    (n_records,) = struct.unpack_from("<q", raw, 236)
    dur_num, dur_den = struct.unpack_from("<II", raw, 244)
    if version >= 2.0:
        (head_blocks,) = struct.unpack_from("<H", raw, 184)
        header_bytes = head_blocks * 256
        (ns,) = struct.unpack_from("<H", raw, 252)
    else:
        (header_bytes,) = struct.unpack_from("<q", raw, 184)
        (ns,) = struct.unpack_from("<I", raw, 252)
    if ns < 1:
        raise GdfError("no signals declared")
    if n_records < 0:
        raise GdfError(f"record count {n_records} unsupported (streamed file?)")
    if dur_num == 0 or dur_den == 0:
        raise GdfError("zero record duration")
    if header_bytes < 256 + 256 * ns or len(raw) < header_bytes:
        raise GdfError("header length field disagrees with file size")

    ch = raw[256:256 + 256 * ns]
    labels = [_strz(ch[16 * k:16 * (k + 1)]) for k in range(ns)]
    physmin = np.frombuffer(ch, "<f8", ns, 104 * ns)
    physmax = np.frombuffer(ch, "<f8", ns, 112 * ns)
    dig_t = "<f8" if version >= 2.0 else "<i8"
    digmin = np.frombuffer(ch, dig_t, ns, 120 * ns).astype(np.float64)
    digmax = np.frombuffer(ch, dig_t, ns, 128 * ns).astype(np.float64)
    spr = np.frombuffer(ch, "<u4", ns, 216 * ns)
    gdftyp = np.frombuffer(ch, "<u4", ns, 220 * ns)

    rec_sec = dur_num / dur_den
    channels = []
    fields = []
    for k in range(ns):
        t = int(gdftyp[k])
        if t not in _SAMPLE_DTYPES:
            raise GdfError(f"unsupported sample type {t} on channel {labels[k]!r}")
        if spr[k] < 1:
            raise GdfError(f"channel {labels[k]!r} declares no samples per record")
        channels.append(GdfChannel(
            label=labels[k],
            physmin=float(physmin[k]), physmax=float(physmax[k]),
            digmin=float(digmin[k]), digmax=float(digmax[k]),
            samples_per_record=int(spr[k]), sample_type=t,
            fs=float(spr[k]) / rec_sec,
        ))
        fields.append((f"c{k}", _SAMPLE_DTYPES[t], (int(spr[k]),)))

    rec_dtype = np.dtype(fields)
    body_len = rec_dtype.itemsize * n_records
    if len(raw) < header_bytes + body_len:
        raise GdfError("truncated data records")
    records = np.frombuffer(raw, rec_dtype, n_records, header_bytes)

    signals = []
    for k, c in enumerate(channels):
        dig = records[f"c{k}"].reshape(-1).astype(np.float64)
        if c.digmax == c.digmin:
            raise GdfError(f"degenerate digital range on channel {c.label!r}")
        scale = (c.physmax - c.physmin) / (c.digmax - c.digmin)
        signals.append((dig - c.digmin) * scale + c.physmin)

    events = _read_events(raw, header_bytes + body_len, fallback_fs=channels[0].fs)
    return GdfRecording(version=version, fs=channels[0].fs,
                        channels=tuple(channels), signals=tuple(signals),
                        events=events)


def _read_events(raw, offset, fallback_fs):
    if offset >= len(raw):
        empty = np.zeros(0, dtype=np.int64)
        return GdfEvents(1, fallback_fs, empty, empty.astype(np.uint16),
                         empty.astype(np.uint16), empty)
    ev = raw[offset:]
    if len(ev) < 8:
        raise GdfError("truncated event table header")
    mode = ev[0]
    if mode not in (1, 3):
        raise GdfError(f"unsupported event table mode {mode}")
    nev = int.from_bytes(ev[1:4], "little")
    (efs,) = struct.unpack_from("<f", ev, 4)
    need = 8 + nev * (6 if mode == 1 else 12)
    if len(ev) < need:
        raise GdfError("truncated event table")
    pos = np.frombuffer(ev, "<u4", nev, 8).astype(np.int64) - 1  # stored 1-based
    typ = np.frombuffer(ev, "<u2", nev, 8 + 4 * nev).copy()
    if mode == 3:
        chn = np.frombuffer(ev, "<u2", nev, 8 + 6 * nev).copy()
        dur = np.frombuffer(ev, "<u4", nev, 8 + 8 * nev).astype(np.int64)
    else:
        chn = np.zeros(nev, dtype=np.uint16)
        dur = np.zeros(nev, dtype=np.int64)
    return GdfEvents(mode, efs if efs > 0 else fallback_fs, pos, typ, chn, dur)
