"""Differentiable primitives for the U-Net.

Each op computes its forward value eagerly and, when a tape is active and an
input requires gradients, records a closure producing the input adjoints.
"""
import numpy as np

from .. import _kernels
from ..errors import ArgumentError, ShapeError
from .tensor import Tensor, active_tape

BCE_EPS = 1e-7


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _result(value, inputs, backward_fn):
    out = Tensor(value, dtype=value.dtype)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _check_4d(x, name):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be N x C x H x W, got shape {x.shape}")


def conv2d(x, weight, bias):
    """Stride-1 cross-correlation with zero padding that keeps H and W.

    weight is F x C x k x k with k in {1, 3}; bias has length F.
    """
    xd, wd, bd = _data(x), _data(weight), _data(bias)
    _check_4d(xd, "input")
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3] or wd.shape[2] not in (1, 3):
        raise ShapeError(f"weight must be F x C x 3 x 3 or F x C x 1 x 1, got {wd.shape}")
    if wd.shape[1] != xd.shape[1]:
        raise ShapeError(f"channel mismatch: input has {xd.shape[1]}, weight expects {wd.shape[1]}")
    if bd.shape != (wd.shape[0],):
        raise ShapeError(f"bias must have shape ({wd.shape[0]},), got {bd.shape}")
    k = wd.shape[2]
    xd = np.ascontiguousarray(xd)
    out, cache = _kernels.conv2d_forward(xd, np.ascontiguousarray(wd), bd)

    def backward(g):
        g = np.ascontiguousarray(g)
        dx = dw = db = None
        if isinstance(x, Tensor) and x.requires_grad:
            dx = _kernels.conv2d_grad_input(g, np.ascontiguousarray(wd))
        if isinstance(weight, Tensor) and weight.requires_grad:
            dw = _kernels.conv2d_grad_weight(xd, g, k, cache)
        if isinstance(bias, Tensor) and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _result(out, (x, weight, bias), backward)


def max_pool2d(x):
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    element of the window in row-major order."""
    xd = _data(x)
    _check_4d(xd, "input")
    if xd.shape[2] % 2 or xd.shape[3] % 2:
        raise ShapeError(f"max_pool2d needs even H and W, got {xd.shape[2]}x{xd.shape[3]}")
    out, idx = _kernels.maxpool2x2(np.ascontiguousarray(xd))

    def backward(g):
        return (_kernels.maxpool2x2_backward(np.ascontiguousarray(g), idx),)

    return _result(out, (x,), backward)


def upsample_nearest2x(x):
    xd = _data(x)
    _check_4d(xd, "input")
    out = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)

    def backward(g):
        n, c, h, w = xd.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


def relu(x):
    xd = _data(x)
    mask = xd > 0
    out = np.where(mask, xd, 0).astype(xd.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward)


def sigmoid(x):
    xd = _data(x)
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype, copy=False)

    def backward(g):
        return (g * out * (1 - out),)

    result = _result(out, (x,), backward)
    result.logits = x if isinstance(x, Tensor) else None
    return result


def dropout(x, p, training, rng_seed=None):
    """Inverted dropout: zero each element with probability p and scale the
    survivors by 1/(1-p) while training; identity otherwise."""
    if not 0 <= p < 1:
        raise ArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    xd = _data(x)
    keep = np.random.default_rng(rng_seed).random(xd.shape) >= p
    scale = keep.astype(xd.dtype) / xd.dtype.type(1 - p)
    out = xd * scale

    def backward(g):
        return (g * scale,)

    return _result(out, (x,), backward)


def concat_channels(a, b):
    ad, bd = _data(a), _data(b)
    _check_4d(ad, "a")
    _check_4d(bd, "b")
    if ad.shape[0] != bd.shape[0] or ad.shape[2:] != bd.shape[2:]:
        raise ShapeError(f"cannot concatenate {ad.shape} and {bd.shape} along channels")
    c1 = ad.shape[1]
    out = np.concatenate([ad, bd], axis=1)

    def backward(g):
        return g[:, :c1], g[:, c1:]

    return _result(out, (a, b), backward)


def slice_channels(x, start, stop):
    xd = _data(x)
    _check_4d(xd, "input")
    if not 0 <= start < stop <= xd.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {xd.shape[1]} channels")
    out = np.ascontiguousarray(xd[:, start:stop])

    def backward(g):
        full = np.zeros_like(xd)
        full[:, start:stop] = g
        return (full,)

    return _result(out, (x,), backward)


def add(a, b):
    ad, bd = _data(a), _data(b)
    if ad.shape != bd.shape:
        raise ShapeError(f"add needs equal shapes, got {ad.shape} and {bd.shape}")
    return _result(ad + bd, (a, b), lambda g: (g, g))


def mul(a, b):
    ad, bd = _data(a), _data(b)
    if ad.shape != bd.shape:
        raise ShapeError(f"mul needs equal shapes, got {ad.shape} and {bd.shape}")
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tensor_sum(x):
    xd = _data(x)
    return _result(np.asarray(xd.sum(), dtype=xd.dtype), (x,), lambda g: (np.full_like(xd, g),))


def bce_loss(pred, target, weight=None):
    """Weighted binary cross-entropy.

    Per sample: pixel-mean of -[t log p + (1-t) log(1-p)] with p clamped to
    [eps, 1-eps], times that sample's weight. The result is the batch mean.

    When ``pred`` is the output of ``sigmoid`` the adjoint is taken w.r.t. its
    logits, w * (p - t) / (N * pixels), so pixels whose float32 sigmoid has
    saturated still receive gradient. Away from saturation and the clamp
    this equals the chained gradient.
    """
    pd = _data(pred)
    td = np.asarray(target, dtype=pd.dtype)
    if pd.shape != td.shape:
        raise ShapeError(f"pred {pd.shape} and target {td.shape} differ")
    n = pd.shape[0]
    wd = np.ones(n, dtype=pd.dtype) if weight is None else np.asarray(weight, dtype=pd.dtype).reshape(-1)
    if wd.shape != (n,):
        raise ShapeError(f"need one weight per sample ({n}), got {wd.shape}")
    per_pixel = pd[0].size
    lo, hi = pd.dtype.type(BCE_EPS), pd.dtype.type(1 - BCE_EPS)
    pc = np.clip(pd, lo, hi)
    elem = -(td * np.log(pc) + (1 - td) * np.log(1 - pc))
    per_sample = elem.reshape(n, -1).mean(axis=1)
    value = np.asarray((wd * per_sample).mean(), dtype=pd.dtype)

    scale_shape = (n,) + (1,) * (pd.ndim - 1)
    logits = pred.logits if isinstance(pred, Tensor) else None
    if logits is not None and logits.requires_grad:

        def fused(g):
            scale = (g * wd / (n * per_pixel)).reshape(scale_shape)
            return ((scale * (pd - td)).astype(pd.dtype, copy=False),)

        return _result(value, (logits,), fused)

    def backward(g):
        inside = (pd >= lo) & (pd <= hi)
        scale = (g * wd / (n * per_pixel)).reshape(scale_shape)
        dp = scale * (-td / pc + (1 - td) / (1 - pc)) * inside
        return (dp.astype(pd.dtype, copy=False),)

    return _result(value, (pred,), backward)
