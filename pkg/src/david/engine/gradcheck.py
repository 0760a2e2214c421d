"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import backward


def relative_error(analytic, numeric, floor_frac=1e-3):
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``floor_frac * max|n|`` so entries that are numerically
    zero do not dominate the ratio.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.abs(n).max(), np.abs(a).max())
    if scale == 0:
        return 0.0
    floor = floor_frac * scale
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grad(fn, tensor, step=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor.data``."""
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn().data)
        flat[i] = orig - step
        down = float(fn().data)
        flat[i] = orig
        out.append((up - down) / (2 * step))
    return np.array(out)


def check_gradients(fn, tensors, step=1e-5, max_entries=None, rng=None):
    """Compare backprop against finite differences.

    ``fn`` builds a scalar loss from ``tensors`` (which must require grad).
    Returns the worst relative error over all checked tensors.  When
    ``max_entries`` is set, only that many randomly chosen entries per
    tensor are perturbed.
    """
    rng = np.random.default_rng(rng)
    for t in tensors:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in tensors:
        analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
        else:
            idx = np.arange(t.size)
        numeric = numeric_grad(fn, t, step, idx)
        worst = max(worst, relative_error(analytic[idx], numeric))
    return worst
