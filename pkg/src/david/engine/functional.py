"""Differentiable ops used by the deblurring networks.

Image tensors are channels-first, either ``C x H x W`` or ``B x C x H x W``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _operand(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = _operand(b, a) if isinstance(a, Tensor) else as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = _operand(a, b)
    else:
        b = _operand(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def elementwise_mul(a, b):
    """Pixel-wise product.  Shapes must agree up to numpy broadcasting."""
    a = as_tensor(a)
    b = _operand(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"elementwise_mul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "mul")


mul = elementwise_mul


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    # np.maximum propagates NaN so blow-ups stay visible downstream
    return make_result(np.maximum(x.data, x.data.dtype.type(0)), (x,), backward, "relu")


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for a rank-{ndim} tensor")
    return axis % ndim


def softmax_over_axis(x, axis):
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


# -- reductions / shape ---------------------------------------------------------

def sum_over_axis(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(_check_axis(a, x.ndim) for a in axes)
    else:
        axes = tuple(range(x.ndim))
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    out = x.data.sum(axis=axes, keepdims=keepdims)
    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    total = sum_over_axis(x, axis, keepdims=keepdims)
    count = x.size // max(total.size, 1) if x.size else 1
    return mul(total, 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    orig = x.shape

    def backward(g):
        return (g.reshape(orig),)

    return make_result(x.data.reshape(shape), (x,), backward, "reshape")


def getitem(x, index):
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    advanced = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return make_result(np.array(x.data[index]), (x,), backward, "getitem")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack needs at least one tensor")
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tuple(tensors), backward, "stack")


def concat_channels(a, b):
    """Concatenate along the channel axis (axis -3); ``a`` comes first."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim < 3:
        raise ValueError(f"concat_channels: rank mismatch {a.shape} vs {b.shape}")
    if a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    ca = a.shape[-3]

    def backward(g):
        return g[..., :ca, :, :], g[..., ca:, :, :]

    return make_result(np.concatenate([a.data, b.data], axis=-3), (a, b), backward, "concat")


# -- image ops ------------------------------------------------------------------

def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _batched(fn):
    """Let a 4-D image op also accept a single ``C x H x W`` image."""

    def wrapper(x, *args, **kwargs):
        x = as_tensor(x)
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ValueError(f"{fn.__name__}: expected C x H x W or B x C x H x W, got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding (im2col + one matmul)."""
    weight = as_tensor(weight)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, cin, h, w = x.shape
    if weight.ndim != 4 or weight.shape[1] != cin:
        raise ValueError(
            f"conv2d: input has {cin} channels (shape {x.shape}) but weight expects "
            f"{weight.shape[1] if weight.ndim == 4 else '?'} (shape {weight.shape})"
        )
    cout, _, kh, kw = weight.shape
    if min(h, w, sh, sw) <= 0 or ph < 0 or pw < 0:
        raise ValueError("conv2d: dimensions and strides must be positive")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)

    # channel-major im2col: cols is (cin*kh*kw, n*ho*wo), built from kh*kw strided slices
    hp, wp = h + 2 * ph, w + 2 * pw
    xp = np.zeros((cin, n, hp, wp), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    cols = cols.reshape(cin * kh * kw, n * ho * wo)
    del xp
    w2 = weight.data.reshape(cout, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    # memory stays (cout, n, ho, wo); the returned array is a transposed view
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            dxp = np.zeros((cin, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += dcols[:, i, j]
            gx = dxp[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3)
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=1) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, parents, backward, "conv2d")


@_batched
def maxpool2x2(x):
    """2x2 max-pool, stride 2.  Ties route the gradient to the first max (row-major)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(out, (x,), backward, "maxpool2x2")


def _upsample_matrix(size, dtype):
    # half-pixel centres (align_corners=False), edge-clamped
    out = np.zeros((2 * size, size), dtype=dtype)
    for o in range(2 * size):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), size - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, size - 1)
        frac = src - lo
        out[o, lo] += 1.0 - frac
        out[o, hi] += frac
    return out


_UPSAMPLE_CACHE = {}


def upsample_matrix(size, dtype=np.float64):
    key = (size, np.dtype(dtype).str)
    if key not in _UPSAMPLE_CACHE:
        _UPSAMPLE_CACHE[key] = _upsample_matrix(size, dtype)
    return _UPSAMPLE_CACHE[key]


@_batched
def bilinear_upsample2x(x):
    """Bilinear 2x upsampling, ``align_corners=False`` convention."""
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("bilinear_upsample2x: empty input")
    uh = upsample_matrix(h, x.dtype)
    uw = upsample_matrix(w, x.dtype)
    out = uh @ np.ascontiguousarray(x.data) @ uw.T

    def backward(g):
        return (uh.T @ np.ascontiguousarray(g) @ uw,)

    return make_result(out, (x,), backward, "upsample2x")


def mse(pred, target):
    """Mean squared error as a single fused op."""
    pred = as_tensor(pred)
    target = _operand(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    scale = 2.0 / diff.size

    def backward(g):
        gp = g * scale * diff
        return gp, -gp

    out = np.asarray(np.mean(diff * diff, dtype=np.float64), dtype=pred.dtype)
    return make_result(out, (pred, target), backward, "mse")
