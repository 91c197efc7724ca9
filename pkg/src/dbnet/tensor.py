"""Dense tensor arithmetic with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array (float32 by default, float64 for test
oracles).  Operations executed inside a ``Tape`` context record a backward
rule per output; ``backward(loss, tape)`` replays the rules in reverse
recording order and accumulates gradients into every reachable input that
has ``requires_grad`` set.

All operations are pure functions of their inputs; a tape is single-writer.
Convolution is cross-correlation (no kernel flip) and runs at stride 1;
downsampling is done by pooling.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """N-dimensional array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class TapeError(Exception):
    pass


class Tape:
    """Ordered record of operations; replaying in reverse accumulates gradients.

    Used as a context manager::

        with Tape() as tape:
            loss = ...
        backward(loss, tape)
    """

    def __init__(self):
        self._records = []  # (output Tensor, backward callable)

    def record(self, out, backward_fn):
        self._records.append((out, backward_fn))

    def __len__(self):
        return len(self._records)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


_ACTIVE_TAPE: Tape | None = None


def _record(out, backward_fn):
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE.record(out, backward_fn)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, tape: Tape):
    """Accumulate d(loss)/d(input) into .grad of every recorded input.

    ``loss`` must be the final node recorded on the tape.
    """
    if len(tape) == 0:
        raise TapeError("backward on a tape with no recorded operations")
    if tape._records[-1][0] is not loss:
        raise TapeError("loss is not the final node recorded on the tape")
    if loss.data.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._records):
        if out.grad is not None:
            fn(out.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise arithmetic (with numpy broadcasting)

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    _record(out, bwd)
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    _record(out, bwd)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    _record(out, bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c), requires_grad=a.requires_grad)

    def bwd(g):
        _accumulate(a, g * a.data.dtype.type(c))

    _record(out, bwd)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad)

    def bwd(g):
        _accumulate(a, g / a.data)

    _record(out, bwd)
    return out


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient is blocked where the floor binds."""
    out = Tensor(np.maximum(a.data, a.data.dtype.type(floor)), requires_grad=a.requires_grad)
    mask = a.data > floor

    def bwd(g):
        _accumulate(a, g * mask)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    _record(out, bwd)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), requires_grad=a.requires_grad)

    def bwd(g):
        _accumulate(a, g.transpose(inv))

    _record(out, bwd)
    return out


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=axis),
        requires_grad=any(p.requires_grad for p in parts),
    )
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    _record(out, bwd)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy(), requires_grad=a.requires_grad)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    _record(out, bwd)
    return out


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape) / a.data.dtype.type(count))

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# activations

def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), requires_grad=a.requires_grad)

    def bwd(g):
        _accumulate(a, g * (a.data > 0))

    _record(out, bwd)
    return out


def elu(a: Tensor) -> Tensor:
    pos = a.data >= 0
    e = np.exp(np.minimum(a.data, 0)) - 1
    out = Tensor(np.where(pos, a.data, e), requires_grad=a.requires_grad)

    def bwd(g):
        _accumulate(a, g * np.where(pos, a.data.dtype.type(1), e + 1))

    _record(out, bwd)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    s = s.astype(a.dtype, copy=False)
    out = Tensor(s, requires_grad=a.requires_grad)

    def bwd(g):
        _accumulate(a, g * s * (1 - s))

    _record(out, bwd)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, requires_grad=a.requires_grad)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(a, p * (g - dot))

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# dropout

def dropout(a: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.dtype) / a.data.dtype.type(1.0 - rate)
    out = Tensor(a.data * keep, requires_grad=a.requires_grad)

    def bwd(g):
        _accumulate(a, g * keep)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolution

def _conv_padding(padding, kh_eff, kw_eff):
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        th, tw = kh_eff - 1, kw_eff - 1
        return (th // 2, th - th // 2), (tw // 2, tw - tw // 2)
    if padding == "causal":
        # left-only padding on the last axis: output[t] depends only on input[<= t]
        th = kh_eff - 1
        return (th // 2, th - th // 2), (kw_eff - 1, 0)
    raise ValueError(f"unknown padding mode {padding!r}")


def conv2d(x: Tensor, w: Tensor, padding: str = "valid", dilation=(1, 1), groups: int = 1) -> Tensor:
    """Stride-1 cross-correlation of x[b, c_in, h, w] with w[c_out, c_in/groups, kh, kw].

    `same` pads to preserve spatial extents; `causal` pads only on the left of
    the last axis so output[t] depends on input[<= t] (and `same` on the height
    axis).  Dilation inflates the kernel without adding parameters.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.data.shape} and {w.data.shape}")
    b, cin, h, wd = x.data.shape
    cout, cin_g, kh, kw = w.data.shape
    dh, dw = dilation
    if cin % groups or cout % groups:
        raise ValueError(f"channel counts {cin}->{cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(
            f"kernel shape {w.data.shape} does not match input shape {x.data.shape} with groups={groups}"
        )
    kh_eff = (kh - 1) * dh + 1
    kw_eff = (kw - 1) * dw + 1
    (pt, pb), (pl, pr) = _conv_padding(padding, kh_eff, kw_eff)
    hp, wp = h + pt + pb, wd + pl + pr
    if kh_eff > hp or kw_eff > wp:
        raise ValueError(
            f"dilated kernel {w.data.shape} (effective {kh_eff}x{kw_eff}) does not fit "
            f"padded input {x.data.shape} (padded to {hp}x{wp})"
        )
    if pt or pb or pl or pr:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x.data
    oh, ow = hp - kh_eff + 1, wp - kw_eff + 1

    # windows[b, c, oh, ow, kh, kw] via stride tricks, then one GEMM per group
    win = sliding_window_view(xp, (kh_eff, kw_eff), axis=(2, 3))[..., ::dh, ::dw]
    out_g = cout // groups
    cols = []
    y = np.empty((b, cout, oh, ow), dtype=x.dtype)
    for g in range(groups):
        xg = win[:, g * cin_g:(g + 1) * cin_g]
        col = np.ascontiguousarray(xg.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, cin_g * kh * kw)
        wg = w.data[g * out_g:(g + 1) * out_g].reshape(out_g, cin_g * kh * kw)
        y[:, g * out_g:(g + 1) * out_g] = (col @ wg.T).reshape(b, oh, ow, out_g).transpose(0, 3, 1, 2)
        cols.append(col)
    out = Tensor(y, requires_grad=x.requires_grad or w.requires_grad)

    def bwd(g_out):
        if w.requires_grad:
            dw_all = np.empty_like(w.data)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for g in range(groups):
            gg = np.ascontiguousarray(
                g_out[:, g * out_g:(g + 1) * out_g].transpose(0, 2, 3, 1)
            ).reshape(b * oh * ow, out_g)
            wg = w.data[g * out_g:(g + 1) * out_g].reshape(out_g, cin_g * kh * kw)
            if w.requires_grad:
                dw_all[g * out_g:(g + 1) * out_g] = (gg.T @ cols[g]).reshape(out_g, cin_g, kh, kw)
            if x.requires_grad:
                dcol = (gg @ wg).reshape(b, oh, ow, cin_g, kh, kw)
                sl = slice(g * cin_g, (g + 1) * cin_g)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, sl, i * dh:i * dh + oh, j * dw:j * dw + ow] += dcol[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
        if w.requires_grad:
            _accumulate(w, dw_all)
        if x.requires_grad:
            _accumulate(x, dxp[:, :, pt:pt + h, pl:pl + wd])

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# pooling

def pool2d(x: Tensor, width: int, mode: str = "average") -> Tensor:
    """Non-overlapping (1, width) windows along the last axis.

    A trailing remainder shorter than `width` is dropped (floor semantics).
    """
    if width < 1:
        raise ValueError(f"pool width must be >= 1, got {width}")
    if mode not in ("average", "max"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    w = x.data.shape[-1]
    ow = w // width
    if ow < 1:
        raise ValueError(f"pool width {width} exceeds axis extent {w}")
    lead = x.data.shape[:-1]
    windows = x.data[..., :ow * width].reshape(*lead, ow, width)
    if mode == "average":
        out = Tensor(windows.mean(axis=-1), requires_grad=x.requires_grad)

        def bwd(g):
            dx = np.zeros_like(x.data)
            dx[..., :ow * width] = np.repeat(g / x.data.dtype.type(width), width, axis=-1)
            _accumulate(x, dx)

    else:
        arg = windows.argmax(axis=-1)
        out = Tensor(windows.max(axis=-1), requires_grad=x.requires_grad)

        def bwd(g):
            dwin = np.zeros_like(windows)
            np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
            dx = np.zeros_like(x.data)
            dx[..., :ow * width] = dwin.reshape(*lead, ow * width)
            _accumulate(x, dx)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# batch normalization (fused, with the closed-form backward)

def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalize by batch statistics over all axes except channel axis 1.

    Returns (out, batch_mean, batch_var); the variance is the biased estimate
    used for normalization.  Running statistics are the caller's concern.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    m = x.data.mean(axis=axes, keepdims=True)
    v = x.data.var(axis=axes, keepdims=True)
    istd = 1.0 / np.sqrt(v + eps)
    istd = istd.astype(x.dtype, copy=False)
    xhat = (x.data - m) * istd
    gshape = (1, -1) + (1,) * (x.ndim - 2)
    out = Tensor(
        gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape),
        requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad,
    )
    n = x.data.size // x.data.shape[1]

    def bwd(g):
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(gshape)
            t1 = dxhat.sum(axis=axes, keepdims=True)
            t2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            _accumulate(x, istd / n * (n * dxhat - t1 - xhat * t2))

    _record(out, bwd)
    return out, m.reshape(-1), v.reshape(-1)


def batch_norm_infer(x: Tensor, gamma: Tensor, beta: Tensor,
                     running_mean: np.ndarray, running_var: np.ndarray, eps: float) -> Tensor:
    """Normalize by running statistics; a pure function of input and params."""
    gshape = (1, -1) + (1,) * (x.ndim - 2)
    istd = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(gshape)
    mean = running_mean.astype(x.dtype).reshape(gshape)
    scale_ = gamma.data.reshape(gshape) * istd
    out = Tensor(scale_ * (x.data - mean) + beta.data.reshape(gshape),
                 requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad)
    xhat = (x.data - mean) * istd

    def bwd(g):
        axes = (0,) + tuple(range(2, x.ndim))
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        _accumulate(x, g * scale_)

    _record(out, bwd)
    return out
