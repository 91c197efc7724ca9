"""Central finite-difference gradient oracle, shared by the test modules.

Everything here runs in float64 and is independent of the backward rules it
checks: losses are evaluated by plain forward passes with entries perturbed
one at a time.
"""

import numpy as np

from dbnet.tensor import Tape, Tensor, backward


def numerical_grad(f, arr, eps=1e-3, entries=None):
    """Central differences of scalar-valued f at the given flat entries.

    Returns (indices, gradient values).  `entries=None` checks every entry.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    idx = list(idx)
    grads = np.empty(len(idx), dtype=np.float64)
    for pos, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f())
        flat[i] = orig - eps
        lo = float(f())
        flat[i] = orig
        grads[pos] = (hi - lo) / (2 * eps)
    return idx, grads


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return np.max(np.abs(analytic - numeric) / denom)


def check_op(build_loss, tensors, eps=1e-3, max_entries=None, rng=None):
    """Compare analytic grads of `tensors` against finite differences.

    `build_loss()` must run a forward pass over the current tensor values and
    return the scalar loss Tensor.  Returns the worst relative error.
    """
    for t in tensors:
        assert t.dtype == np.float64, "gradient checks run in 64-bit"
        t.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    backward(loss, tape)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        entries = None
        if max_entries is not None and t.size > max_entries:
            entries = (rng or np.random.default_rng(0)).choice(t.size, size=max_entries, replace=False)
        idx, num = numerical_grad(lambda: build_loss().data, t.data, eps=eps, entries=entries)
        ana = t.grad.reshape(-1)[idx]
        worst = max(worst, relative_error(ana, num))
    return worst
