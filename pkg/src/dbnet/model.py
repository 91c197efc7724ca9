"""Dual-branch network: local conv blocks, global conv blocks, classifier.

Two parallel branches process each trial.  The temporal branch compresses
the time axis through an EEGNet-style stack (temporal conv, depthwise
electrode conv, separable conv, two poolings) and then treats the remaining
time axis as the sequence; the spectral branch doubles the filter count and
treats the filter axis as the sequence.  Each global block splits its
sequence into overlapping sliding windows, recalibrates every window with a
squeeze-and-excitation gate, runs a residual stack of dilated causal
convolutions per window, and concatenates.  Flattened branch outputs meet in
a single dense softmax classifier.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    DepthwiseConv2d,
    Dropout,
    SeparableConv2d,
)
from .tensor import Tensor

WEIGHTS_MAGIC = b"DBNW"
WEIGHTS_VERSION = 1


class ConfigError(ValueError):
    """A hyperparameter setting violates a structural constraint."""


@dataclass
class DbNetConfig:
    """Architecture hyperparameters; defaults follow the reference setup
    for 250 Hz recordings."""

    n_channels: int
    n_samples: int
    n_classes: int
    temporal_filters: int = 8        # maps from the first temporal conv
    temporal_kernel: int = 48        # one fifth of the sampling rate
    spectral_filters: int = 16       # doubled filter count in the spectral branch
    spectral_kernel: int = 64        # one quarter of the sampling rate
    depth_multiplier: int = 2        # spatial maps per temporal map
    window_stride: int = 1
    window_count: int = 6
    dcc_layers: int = 4
    dcc_kernel: int = 4
    temporal_pooling: str = "average"
    spectral_pooling: str = "max"
    se_enabled: bool = True
    sw_enabled: bool = True
    gc_enabled: bool = True
    dropout: float = 0.3
    se_reduction: int = 16

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BranchDims:
    """Integer geometry of both branches for a validated config."""

    temporal_maps: int       # maps leaving the temporal local block
    temporal_len: int        # sequence length leaving the temporal local block
    spectral_maps: int       # maps leaving the spectral local block
    spectral_len: int        # sequence length leaving the spectral local block
    temporal_sub_len: int    # per-window length on the time axis
    spectral_sub_len: int    # per-window length on the filter axis
    n_windows: int           # effective window count (1 when splitting is off)
    concat_len: int          # width of the classifier input


def receptive_field(d: int, k: int, j: int) -> int:
    """Receptive field after j layers with the constant per-layer increment
    [(d-1)(k-1)+k] - 1 (the printed recurrence; base case 1)."""
    r = 1
    step = (d - 1) * (k - 1) + k - 1
    for _ in range(j):
        r += step
    return r


def receptive_field_dilated(d: int, k: int) -> int:
    """Receptive field of the stack as built: layer j uses dilation rate j,
    so each layer adds (k-1)*j positions."""
    r = 1
    for j in range(1, d + 1):
        r += (k - 1) * j
    return r


def _pool_width(kernel: int, label: str) -> int:
    if kernel % 8 != 0 or kernel < 8:
        raise ConfigError(f"{label} kernel must be a positive multiple of 8 (pool width kernel/8), got {kernel}")
    return kernel // 8


def derive_dims(cfg: DbNetConfig) -> BranchDims:
    """Exact integer geometry; raises ConfigError naming the violated
    constraint when any extent collapses."""
    pool_t = _pool_width(cfg.temporal_kernel, "temporal")
    pool_s = _pool_width(cfg.spectral_kernel, "spectral")
    # two floor divisions by kernel/8 == floor(64*T/kernel^2)
    temporal_len = (cfg.n_samples // pool_t) // pool_t
    spectral_len = (cfg.n_samples // pool_s) // pool_s
    temporal_maps = cfg.temporal_filters * cfg.depth_multiplier
    spectral_maps = cfg.spectral_filters * cfg.depth_multiplier
    if temporal_len < 1:
        raise ConfigError(
            f"temporal sequence length floor(64*{cfg.n_samples}/{cfg.temporal_kernel}^2) = {temporal_len} "
            "must be positive (pooled-length constraint)"
        )
    if spectral_len < 1:
        raise ConfigError(
            f"spectral temporal length floor(64*{cfg.n_samples}/{cfg.spectral_kernel}^2) = {spectral_len} "
            "must be positive (pooled-length constraint)"
        )
    if cfg.gc_enabled and cfg.sw_enabled:
        if cfg.window_count < 1 or cfg.window_stride < 1:
            raise ConfigError("window count and stride must be positive")
        span = cfg.window_stride * (cfg.window_count - 1)
        t_sub = temporal_len - span
        s_sub = spectral_maps - span
        if t_sub < 1:
            raise ConfigError(
                f"window-fit constraint violated on the time axis: length {temporal_len} < "
                f"stride {cfg.window_stride} * ({cfg.window_count} - 1) + 1"
            )
        if s_sub < 1:
            raise ConfigError(
                f"window-fit constraint violated on the filter axis: {spectral_maps} maps < "
                f"stride {cfg.window_stride} * ({cfg.window_count} - 1) + 1"
            )
        n_windows = cfg.window_count
    else:
        t_sub, s_sub, n_windows = temporal_len, spectral_maps, 1
    if cfg.gc_enabled:
        concat_len = temporal_maps * n_windows * t_sub + n_windows * s_sub * spectral_len
    else:
        concat_len = temporal_maps * temporal_len + spectral_maps * spectral_len
    return BranchDims(
        temporal_maps=temporal_maps,
        temporal_len=temporal_len,
        spectral_maps=spectral_maps,
        spectral_len=spectral_len,
        temporal_sub_len=t_sub,
        spectral_sub_len=s_sub,
        n_windows=n_windows,
        concat_len=concat_len,
    )


def validate_hyperparams(cfg: DbNetConfig) -> BranchDims:
    """Check the receptive-field constraint: the dilated-causal stack must
    cover the longest subsequence it processes.  Returns the derived dims;
    raises ConfigError reporting the receptive field and both subsequence
    lengths on violation."""
    dims = derive_dims(cfg)
    if cfg.n_channels < 1 or cfg.n_samples < 1 or cfg.n_classes < 2:
        raise ConfigError(
            f"need at least 1 channel, 1 sample, 2 classes; got "
            f"C={cfg.n_channels}, T={cfg.n_samples}, classes={cfg.n_classes}"
        )
    if cfg.temporal_pooling not in ("average", "max") or cfg.spectral_pooling not in ("average", "max"):
        raise ConfigError("pooling types must be 'average' or 'max'")
    if cfg.gc_enabled and cfg.sw_enabled:
        r = receptive_field_dilated(cfg.dcc_layers, cfg.dcc_kernel)
        longest = max(dims.temporal_sub_len, dims.spectral_sub_len)
        if r < longest:
            raise ConfigError(
                f"receptive-field constraint violated: R={r} with {cfg.dcc_layers} layers of kernel "
                f"{cfg.dcc_kernel} is smaller than the longest subsequence "
                f"(time {dims.temporal_sub_len}, filter {dims.spectral_sub_len})"
            )
    return dims


def sliding_window_split(seq: Tensor, axis: int, n: int, stride: int = 1):
    """Split into n overlapping windows of length extent - stride*(n-1);
    window N (1-based) starts at (N-1)*stride."""
    extent = seq.shape[axis]
    length = extent - stride * (n - 1)
    if length < 1:
        raise ValueError(
            f"window longer than sequence: extent {extent} cannot hold {n} windows at stride {stride}"
        )
    return [T.slice_axis(seq, axis, i * stride, i * stride + length) for i in range(n)]


class SqueezeExcite:
    """Gate a window elementwise along its sequence axis.

    The descriptor is the mean over `reduce_axis`; two dense layers (ReLU
    bottleneck of ceil(len/reduction), sigmoid restore) produce weights in
    (0, 1) that multiply the window broadcast along the reduced axis.
    """

    def __init__(self, seq_len, reduce_axis, *, reduction=16, rng=None, dtype=np.float32):
        bottleneck = max(1, math.ceil(seq_len / reduction))
        self.reduce_axis = reduce_axis
        self.seq_len = seq_len
        self.fc1 = Dense(seq_len, bottleneck, rng=rng, dtype=dtype)
        self.fc2 = Dense(bottleneck, seq_len, rng=rng, dtype=dtype)

    def __call__(self, sub, train=False, rng=None):
        desc = T.reshape(T.reduce_mean(sub, axis=self.reduce_axis), (sub.shape[0], self.seq_len))
        w = T.sigmoid(self.fc2(T.relu(self.fc1(desc))))
        shape = [sub.shape[0], 1, 1, 1]
        shape[3 if self.reduce_axis == 1 else 1] = self.seq_len
        return T.mul(sub, T.reshape(w, shape))

    def parameters(self):
        out = []
        for lname, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            out += [(f"{lname}.{n}", t) for n, t in layer.parameters()]
        return out

    def state(self):
        return [(n, t.data) for n, t in self.parameters()]


class DccStack:
    """Residual stack of dilated causal convolutions along the last axis.

    Layer j applies a causal conv with dilation j, then batch norm, then ELU.
    The first layer reads the gated window directly; every later layer reads
    ELU(window + previous output), and the stack returns
    ELU(window + last output).
    """

    def __init__(self, channels, depth, kernel, *, rng=None, dtype=np.float32):
        self.depth = depth
        self.convs = [
            Conv2d(channels, channels, (1, kernel), padding="causal", dilation=(1, j), rng=rng, dtype=dtype)
            for j in range(1, depth + 1)
        ]
        self.norms = [BatchNorm(channels, dtype=dtype) for _ in range(depth)]

    def __call__(self, x, train=False, rng=None):
        h = x
        out = None
        for j in range(self.depth):
            out = T.elu(self.norms[j](self.convs[j](h), train=train))
            if j < self.depth - 1:
                h = T.elu(T.add(x, out))
        return T.elu(T.add(x, out))

    def parameters(self):
        out = []
        for j, (conv, bn) in enumerate(zip(self.convs, self.norms), start=1):
            out.append((f"conv{j}.weight", conv.weight))
            out += [(f"bn{j}.{n}", t) for n, t in bn.parameters()]
        return out

    def state(self):
        out = []
        for j, (conv, bn) in enumerate(zip(self.convs, self.norms), start=1):
            out.append((f"conv{j}.weight", conv.weight.data))
            out += [(f"bn{j}.{n}", v) for n, v in bn.state()]
        return out

    def named_norms(self):
        return [(f"bn{j}", bn) for j, bn in enumerate(self.norms, start=1)]


class LocalConvBlock:
    """Temporal conv + BN, depthwise electrode conv + BN + ELU + pool +
    dropout, separable conv + BN + ELU + pool + dropout."""

    def __init__(self, n_channels, filters, kernel, depth_mult, pooling, dropout,
                 *, rng=None, dtype=np.float32):
        pool = kernel // 8
        maps = filters * depth_mult
        self.conv1 = Conv2d(1, filters, (1, kernel), padding="same", rng=rng, dtype=dtype)
        self.bn1 = BatchNorm(filters, dtype=dtype)
        self.depthwise = DepthwiseConv2d(filters, depth_mult, n_channels, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(maps, dtype=dtype)
        self.separable = SeparableConv2d(maps, kernel // 4, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm(maps, dtype=dtype)
        self.pool = pool
        self.pooling = pooling
        self.drop = Dropout(dropout)

    def __call__(self, x, train=False, rng=None):
        h = self.bn1(self.conv1(x), train=train)
        h = T.elu(self.bn2(self.depthwise(h), train=train))
        h = self.drop(T.pool2d(h, self.pool, self.pooling), train=train, rng=rng)
        h = T.elu(self.bn3(self.separable(h), train=train))
        h = self.drop(T.pool2d(h, self.pool, self.pooling), train=train, rng=rng)
        return h

    def parameters(self):
        groups = [("conv1", self.conv1), ("bn1", self.bn1), ("depthwise", self.depthwise),
                  ("bn2", self.bn2), ("separable", self.separable), ("bn3", self.bn3)]
        return [(f"{g}.{n}", t) for g, layer in groups for n, t in layer.parameters()]

    def state(self):
        groups = [("conv1", self.conv1), ("bn1", self.bn1), ("depthwise", self.depthwise),
                  ("bn2", self.bn2), ("separable", self.separable), ("bn3", self.bn3)]
        return [(f"{g}.{n}", v) for g, layer in groups for n, v in layer.state()]

    def named_norms(self):
        return [("bn1", self.bn1), ("bn2", self.bn2), ("bn3", self.bn3)]


class GlobalConvBlock:
    """Per-window squeeze-excite gating and residual dilated-causal stacks.

    Each window owns its gate and stack, so distinct windows learn distinct
    feature extractors.  The temporal branch convolves along time; the
    spectral branch splits the filter axis and convolves along it with the
    remaining time axis as channels.
    """

    def __init__(self, branch, dims: BranchDims, cfg: DbNetConfig, *, rng=None, dtype=np.float32):
        self.branch = branch
        self.stride = cfg.window_stride
        self.se_enabled = cfg.se_enabled
        self.n_windows = dims.n_windows if cfg.sw_enabled else 1
        if branch == "temporal":
            self.split_axis = 3
            self.sub_len = dims.temporal_sub_len
            se_reduce_axis = 1                   # mask the filter axis
            channels = dims.temporal_maps
        else:
            self.split_axis = 1
            self.sub_len = dims.spectral_sub_len
            se_reduce_axis = 3                   # mask the time axis
            channels = dims.spectral_len
        self.se = [
            SqueezeExcite(self.sub_len, se_reduce_axis, reduction=cfg.se_reduction, rng=rng, dtype=dtype)
            for _ in range(self.n_windows)
        ] if cfg.se_enabled else []
        self.dcc = [
            DccStack(channels, cfg.dcc_layers, cfg.dcc_kernel, rng=rng, dtype=dtype)
            for _ in range(self.n_windows)
        ]

    def __call__(self, x, train=False, rng=None):
        if self.n_windows == 1:
            windows = [x]
        else:
            windows = sliding_window_split(x, self.split_axis, self.n_windows, self.stride)
        outs = []
        for i, win in enumerate(windows):
            if self.se_enabled:
                win = self.se[i](win, train=train)
            if self.branch == "spectral":
                win = T.transpose(win, (0, 3, 2, 1))
            win = self.dcc[i](win, train=train)
            if self.branch == "spectral":
                win = T.transpose(win, (0, 3, 2, 1))
            outs.append(win)
        return outs[0] if len(outs) == 1 else T.concat(outs, axis=self.split_axis)

    def parameters(self):
        out = []
        for i in range(self.n_windows):
            if self.se_enabled:
                out += [(f"win{i}.se.{n}", t) for n, t in self.se[i].parameters()]
            out += [(f"win{i}.dcc.{n}", t) for n, t in self.dcc[i].parameters()]
        return out

    def state(self):
        out = []
        for i in range(self.n_windows):
            if self.se_enabled:
                out += [(f"win{i}.se.{n}", v) for n, v in self.se[i].state()]
            out += [(f"win{i}.dcc.{n}", v) for n, v in self.dcc[i].state()]
        return out

    def named_norms(self):
        return [(f"win{i}.dcc.{n}", bn)
                for i in range(self.n_windows)
                for n, bn in self.dcc[i].named_norms()]


class DualBranchModel:
    """The full network; build with a validated config and a seed."""

    def __init__(self, cfg: DbNetConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dims = validate_hyperparams(cfg)
        self.dtype = dtype
        self.init_params(seed)

    def init_params(self, seed: int):
        """(Re)draw all weights; layer construction order fixes the draw."""
        cfg, dims = self.cfg, self.dims
        rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
        self.seed = seed
        self.lc_temporal = LocalConvBlock(
            cfg.n_channels, cfg.temporal_filters, cfg.temporal_kernel, cfg.depth_multiplier,
            cfg.temporal_pooling, cfg.dropout, rng=rng, dtype=self.dtype)
        self.lc_spectral = LocalConvBlock(
            cfg.n_channels, cfg.spectral_filters, cfg.spectral_kernel, cfg.depth_multiplier,
            cfg.spectral_pooling, cfg.dropout, rng=rng, dtype=self.dtype)
        if cfg.gc_enabled:
            self.gc_temporal = GlobalConvBlock("temporal", dims, cfg, rng=rng, dtype=self.dtype)
            self.gc_spectral = GlobalConvBlock("spectral", dims, cfg, rng=rng, dtype=self.dtype)
        else:
            self.gc_temporal = self.gc_spectral = None
        self.classifier = Dense(dims.concat_len, cfg.n_classes, rng=rng, dtype=self.dtype)

    def forward(self, x: Tensor, train=False, rng=None, trace=None) -> Tensor:
        """Class probabilities for x[batch, 1, C, T].

        `trace`, when given a dict, records intermediate shapes by name.
        """
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.cfg.n_channels \
                or x.shape[3] != self.cfg.n_samples:
            raise ValueError(
                f"expected input shape (batch, 1, {self.cfg.n_channels}, {self.cfg.n_samples}), got {x.shape}"
            )
        ht = self.lc_temporal(x, train=train, rng=rng)
        hs = self.lc_spectral(x, train=train, rng=rng)
        if trace is not None:
            trace["lc_temporal"] = ht.shape
            trace["lc_spectral"] = hs.shape
        if self.cfg.gc_enabled:
            ht = self.gc_temporal(ht, train=train, rng=rng)
            hs = self.gc_spectral(hs, train=train, rng=rng)
            if trace is not None:
                trace["gc_temporal"] = ht.shape
                trace["gc_spectral"] = hs.shape
        batch = x.shape[0]
        flat = T.concat([T.reshape(ht, (batch, -1)), T.reshape(hs, (batch, -1))], axis=1)
        if trace is not None:
            trace["concat"] = flat.shape
        logits = self.classifier(flat)
        if trace is not None:
            trace["logits"] = logits.shape
        return T.softmax(logits, axis=1)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Class probabilities for raw trials [m, C, T], in inference mode."""
        outs = []
        for lo in range(0, x.shape[0], batch_size):
            chunk = x[lo:lo + batch_size].astype(self.dtype)[:, None, :, :]
            outs.append(self.forward(Tensor(chunk)).data)
        return np.concatenate(outs, axis=0)

    def parameters(self):
        out = []
        for prefix, block in self._blocks():
            out += [(f"{prefix}.{n}", t) for n, t in block.parameters()]
        return out

    def state(self):
        out = []
        for prefix, block in self._blocks():
            out += [(f"{prefix}.{n}", v) for n, v in block.state()]
        return out

    def _blocks(self):
        blocks = [("lc_temporal", self.lc_temporal), ("lc_spectral", self.lc_spectral)]
        if self.cfg.gc_enabled:
            blocks += [("gc_temporal", self.gc_temporal), ("gc_spectral", self.gc_spectral)]
        blocks.append(("classifier", self.classifier))
        return blocks

    # -- state snapshots (early stopping keeps the best epoch's weights) ----

    def snapshot(self):
        return {name: arr.copy() for name, arr in self.state()}

    def load_snapshot(self, snap):
        self._fill_state([(n, snap[n]) for n, _ in self.state()])

    def _fill_state(self, named_arrays):
        current = self.state()
        if [n for n, _ in current] != [n for n, _ in named_arrays]:
            raise ValueError("state names do not match this model's layout")
        values = dict(named_arrays)
        params = dict(self.parameters())
        norms = {}
        for prefix, block in self._blocks():
            for name, bn in getattr(block, "named_norms", list)():
                norms[f"{prefix}.{name}.running_mean"] = (bn, "running_mean")
                norms[f"{prefix}.{name}.running_var"] = (bn, "running_var")
        for full, raw in values.items():
            arr = np.asarray(raw, dtype=self.dtype)
            if full in params:
                if params[full].data.shape != arr.shape:
                    raise ValueError(
                        f"shape mismatch for {full}: expected {params[full].data.shape}, got {arr.shape}")
                params[full].data = arr.copy()
            else:
                bn, stat = norms[full]
                if getattr(bn, stat).shape != arr.shape:
                    raise ValueError(f"shape mismatch for {full}")
                setattr(bn, stat, arr.copy())

    # -- serialization ------------------------------------------------------

    def save(self, path):
        buf = io.BytesIO()
        buf.write(WEIGHTS_MAGIC)
        buf.write(struct.pack("<H", WEIGHTS_VERSION))
        cfg_json = json.dumps(self.cfg.to_dict(), sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(cfg_json)))
        buf.write(cfg_json)
        entries = self.state()
        buf.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                buf.write(struct.pack("<I", extent))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        with open(path, "wb") as f:
            f.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "DualBranchModel":
        with open(path, "rb") as f:
            raw = f.read()
        buf = io.BytesIO(raw)

        def take(n, what):
            b = buf.read(n)
            if len(b) != n:
                raise ValueError(f"truncated weights file while reading {what}")
            return b

        if take(4, "magic") != WEIGHTS_MAGIC:
            raise ValueError(f"bad magic: not a {WEIGHTS_MAGIC.decode()} weights file")
        (version,) = struct.unpack("<H", take(2, "version"))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        (cfg_len,) = struct.unpack("<I", take(4, "config length"))
        cfg = DbNetConfig.from_dict(json.loads(take(cfg_len, "config").decode("utf-8")))
        model = cls(cfg, seed=0)
        (count,) = struct.unpack("<I", take(4, "tensor count"))
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2, "name length"))
            name = take(name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", take(1, "rank"))
            shape = tuple(struct.unpack("<I", take(4, "extent"))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(take(4 * n_items, f"tensor {name}"), dtype="<f4").reshape(shape)
            entries.append((name, arr))
        model._fill_state(entries)
        return model
