"""Parameterized layers: convolutions, batch norm, dense, dropout.

Layers own their Tensors (Glorot-uniform weights, zero biases, seeded) and
expose ``parameters()`` as ordered (name, Tensor) pairs plus ``state()``
which additionally includes batch-norm running statistics.  Forward passes
take ``train`` and, where random masks are drawn, an ``rng``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    def parameters(self):
        """Ordered (name, Tensor) pairs of learnable parameters."""
        return []

    def state(self):
        """Parameters plus non-learned state (running statistics)."""
        return [(name, t.data) for name, t in self.parameters()]


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, *, padding="valid",
                 dilation=(1, 1), groups=1, bias=False, rng=None, dtype=np.float32):
        kh, kw = kernel
        cin_g = in_channels // groups
        fan_in = cin_g * kh * kw
        fan_out = (out_channels // groups) * kh * kw
        self.weight = Tensor(
            glorot_uniform(rng, (out_channels, cin_g, kh, kw), fan_in, fan_out, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def __call__(self, x, train=False, rng=None):
        y = T.conv2d(x, self.weight, padding=self.padding, dilation=self.dilation, groups=self.groups)
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (1, -1, 1, 1)))
        return y

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out


class DepthwiseConv2d(Layer):
    """Per-map electrode contraction: each of the F input maps yields
    `depth` maps from a kernel spanning the full height axis."""

    def __init__(self, in_maps, depth, height, *, rng=None, dtype=np.float32):
        self.height = height
        self.conv = Conv2d(in_maps, in_maps * depth, (height, 1), padding="valid",
                           groups=in_maps, rng=rng, dtype=dtype)

    def __call__(self, x, train=False, rng=None):
        if x.shape[2] != self.height:
            raise ValueError(
                f"depthwise kernel height {self.height} must span the electrode axis, got input {x.shape}"
            )
        return self.conv(x)

    def parameters(self):
        return [("weight", self.conv.weight)]


class SeparableConv2d(Layer):
    """Depthwise temporal convolution followed by a 1x1 pointwise mix."""

    def __init__(self, maps, kernel_width, *, rng=None, dtype=np.float32):
        self.depthwise = Conv2d(maps, maps, (1, kernel_width), padding="same",
                                groups=maps, rng=rng, dtype=dtype)
        self.pointwise = Conv2d(maps, maps, (1, 1), rng=rng, dtype=dtype)

    def __call__(self, x, train=False, rng=None):
        return self.pointwise(self.depthwise(x))

    def parameters(self):
        return [("depthwise", self.depthwise.weight), ("pointwise", self.pointwise.weight)]


class BatchNorm(Layer):
    """Channel-axis batch normalization with EMA running statistics.

    Train mode normalizes by batch statistics and updates
    running <- momentum * running + (1 - momentum) * batch; infer mode uses
    the running statistics (mean 0 / var 1 before any train step).
    """

    def __init__(self, channels, *, eps=1e-3, momentum=0.9, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, train=False, rng=None):
        if train:
            out, batch_mean, batch_var = T.batch_norm_train(x, self.gamma, self.beta, self.eps)
            m = self.running_mean.dtype.type(self.momentum)
            self.running_mean = m * self.running_mean + (1 - m) * batch_mean.astype(self.running_mean.dtype)
            self.running_var = m * self.running_var + (1 - m) * batch_var.astype(self.running_var.dtype)
            return out
        return T.batch_norm_infer(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return super().state() + [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Dense(Layer):
    def __init__(self, in_features, out_features, *, bias=True, rng=None, dtype=np.float32):
        self.weight = Tensor(
            glorot_uniform(rng, (in_features, out_features), in_features, out_features, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x, train=False, rng=None):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (1, -1)))
        return y

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out


class Dropout(Layer):
    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x, train=False, rng=None):
        if train and self.rate > 0.0 and rng is None:
            raise ValueError("dropout in train mode needs an rng")
        return T.dropout(x, self.rate, rng, train)


def global_avg_pool(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis (kept collapsed)."""
    return T.reduce_mean(x, axis=axis)
