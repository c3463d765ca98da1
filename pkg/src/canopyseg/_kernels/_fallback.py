"""Pure numpy versions of the compiled kernels.

Outputs are bit-identical to ``_core``; keep the accumulation order in
``col2im`` (ky, kx ascending) if you touch it.
"""
import numpy as np


def im2col(x, k):
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = xp[:, :, ky:ky + h, kx:kx + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def col2im(cols, shape, k):
    n, c, h, w = shape
    p = k // 2
    cols = cols.reshape(c, k, k, n, h, w)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + h, kx:kx + w] += cols[:, ky, kx].transpose(1, 0, 2, 3)
    if p:
        return np.ascontiguousarray(dxp[:, :, p:-p, p:-p])
    return dxp


def maxpool2x2(x):
    windows = np.stack(
        [x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]]
    )
    idx = np.argmax(windows, axis=0).astype(np.int8)
    out = np.take_along_axis(windows, idx[None].astype(np.intp), axis=0)[0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx):
    n, c, h, w = grad.shape
    dx = np.zeros((n, c, 2 * h, 2 * w), dtype=grad.dtype)
    for a in range(4):
        dy, dxx = divmod(a, 2)
        dx[:, :, dy::2, dxx::2] = np.where(idx == a, grad, 0)
    return dx


def confusion_counts(pred, target, threshold):
    if pred.shape[0] != target.shape[0]:
        raise ValueError("pred and target lengths differ")
    # compare in float64 so float32 predictions meet the exact threshold
    positive = np.asarray(pred, dtype=np.float64) >= threshold
    truth = target.astype(bool)
    tp = int(np.count_nonzero(positive & truth))
    fp = int(np.count_nonzero(positive & ~truth))
    fn = int(np.count_nonzero(~positive & truth))
    tn = int(pred.shape[0] - tp - fp - fn)
    return tp, fp, tn, fn
