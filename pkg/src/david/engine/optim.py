"""Adam optimizer and xavier-normal initialization."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class InitSpec:
    """Fan sizes for xavier-normal init; ``variance = 2 / (n_in + n_out)``."""

    n_in: int
    n_out: int

    def __post_init__(self):
        if self.n_in <= 0 or self.n_out <= 0:
            raise ValueError(f"InitSpec needs positive fan sizes, got n_in={self.n_in}, n_out={self.n_out}")

    @property
    def variance(self):
        return 2.0 / (self.n_in + self.n_out)

    @classmethod
    def for_conv(cls, weight_shape):
        cout, cin, kh, kw = weight_shape
        return cls(n_in=cin * kh * kw, n_out=cout * kh * kw)


def xavier_init(spec, rng, shape=None, dtype=np.float32):
    """Draw a zero-mean normal buffer with variance ``spec.variance``.

    ``shape`` defaults to ``(spec.n_out, spec.n_in)`` (a dense layer).
    """
    if shape is None:
        shape = (spec.n_out, spec.n_in)
    return rng.normal(0.0, np.sqrt(spec.variance), size=shape).astype(dtype)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def moments_for(self, name, like):
        if name not in self.first_moment:
            self.first_moment[name] = np.zeros_like(like)
            self.second_moment[name] = np.zeros_like(like)
        m, v = self.first_moment[name], self.second_moment[name]
        if m.shape != like.shape:
            raise ValueError(f"Adam moments for {name!r} have shape {m.shape}, parameter has {like.shape}")
        return m, v


def adam_step(params, state, lr, grads=None, frozen=()):
    """One bias-corrected Adam update, in place on ``params``.

    Parameters
    ----------
    params : dict[str, Tensor]
        Named parameters; updated in place.
    state : AdamState
        Moment buffers and step counter (mutated).
    lr : float
        Step size, must be positive.
    grads : dict[str, ndarray], optional
        Explicit gradients; defaults to each parameter's ``.grad``.
        A missing gradient counts as zero.
    frozen : collection of str
        Parameter names that are skipped entirely (no moment update).
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads.get(name) if grads is not None else p.grad
        m, v = state.moments_for(name, p.data)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)
    return params, state
