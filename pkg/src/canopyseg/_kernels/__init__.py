"""Hot-loop kernels: compiled Cython core with a numpy fallback.

The compiled module is used when it imports cleanly, unless
``CANOPYSEG_PURE_PYTHON=1`` is set. ``BACKEND`` names the active choice.

Convolutions go through ``conv2d_forward`` / ``conv2d_grad_input`` /
``conv2d_grad_weight``. With the compiled core, 3x3 layers with large planes
and few channels use the direct kernels; everything else is im2col + GEMM.
Both routes agree to float rounding, not bit for bit.
"""
import os
from contextlib import contextmanager

import numpy as np

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None


def available_backends():
    return ("cython", "python") if _core is not None else ("python",)


def set_backend(name: str) -> None:
    """Rebind the module-level kernels to ``"cython"`` or ``"python"``."""
    global BACKEND, im2col, col2im, maxpool2x2, maxpool2x2_backward, confusion_counts
    if name not in available_backends():
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    impl = _core if name == "cython" else _fallback
    BACKEND = name
    im2col = impl.im2col
    col2im = impl.col2im
    maxpool2x2 = impl.maxpool2x2
    maxpool2x2_backward = impl.maxpool2x2_backward
    confusion_counts = impl.confusion_counts


@contextmanager
def backend(name: str):
    previous = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


BACKEND = "python"
set_backend("python" if _core is None or os.environ.get("CANOPYSEG_PURE_PYTHON", "") in ("1", "true", "yes")
            else "cython")

# (min plane size, max C*F) below which the direct 3x3 kernels win; measured
# with benchmarks/bench_kernels.py on a single AVX-512 core
_DIRECT_LIMITS = {"forward": (1024, 1024), "grad_input": (4096, 512), "grad_weight": (4096, 256)}


def _direct(op, k, hw, cf):
    if BACKEND != "cython" or k != 3:
        return False
    min_hw, max_cf = _DIRECT_LIMITS[op]
    return hw >= min_hw and cf <= max_cf


def conv2d_forward(x, w, b):
    """Returns (output, cache); pass cache back to ``conv2d_grad_weight``."""
    n, c, h, wd = x.shape
    f, k = w.shape[0], w.shape[2]
    if _direct("forward", k, h * wd, c * f):
        return _core.conv3x3_direct(x, w, b), None
    cols = im2col(x, k)
    out = (w.reshape(f, -1) @ cols + b[:, None]).reshape(f, n, h, wd).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d_grad_input(g, w):
    n, f, h, wd = g.shape
    c, k = w.shape[1], w.shape[2]
    if _direct("grad_input", k, h * wd, c * f):
        # correlation of g with the spatially flipped, channel-transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _core.conv3x3_direct(g, wt, np.zeros(c, dtype=g.dtype))
    g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
    return col2im(np.ascontiguousarray(w.reshape(f, -1).T @ g2), (n, c, h, wd), k)


def conv2d_grad_weight(x, g, k, cache=None):
    n, c, h, wd = x.shape
    f = g.shape[1]
    if _direct("grad_weight", k, h * wd, c * f):
        return _core.conv3x3_direct_grad_weight(x, g)
    cols = cache if cache is not None else im2col(x, k)
    g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
    return (g2 @ cols.T).reshape(f, c, k, k)


__all__ = [
    "BACKEND",
    "available_backends",
    "backend",
    "set_backend",
    "col2im",
    "confusion_counts",
    "conv2d_forward",
    "conv2d_grad_input",
    "conv2d_grad_weight",
    "im2col",
    "maxpool2x2",
    "maxpool2x2_backward",
]
