"""Minimal batched neural-network layers with hand-written backward passes.

All forwards take (N, C, M) activations (or (N, F) for dense layers) and
return a cache consumed by the matching backward.  Convolutions are stride-1
with zero 'same' padding, implemented by an im2col matmul so one BLAS call
handles the whole batch.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv1d_forward(x, w, b):
    """x: (N, C_in, M); w: (C_out, C_in, k) with odd k; b: (C_out,)."""
    n, c_in, m = x.shape
    c_out, _, k = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=2)  # (N, C_in, M, k)
    cols = cols.transpose(0, 2, 1, 3).reshape(n * m, c_in * k)
    y = cols @ w.reshape(c_out, -1).T + b
    y = y.reshape(n, m, c_out).transpose(0, 2, 1)
    return y, (cols, x.shape, w)


def conv1d_backward(dy, cache):
    cols, x_shape, w = cache
    n, c_in, m = x_shape
    c_out, _, k = w.shape
    pad = k // 2
    dyf = dy.transpose(0, 2, 1).reshape(n * m, c_out)
    dw = (dyf.T @ cols).reshape(c_out, c_in, k)
    db = dyf.sum(axis=0)
    dcols = (dyf @ w.reshape(c_out, -1)).reshape(n, m, c_in, k)
    dxp = np.zeros((n, c_in, m + 2 * pad))
    for j in range(k):
        dxp[:, :, j:j + m] += dcols[:, :, :, j].transpose(0, 2, 1)
    return dxp[:, :, pad:pad + m], dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0.0


def relu_backward(dy, cache):
    return dy * cache


def maxpool2_forward(x):
    """Non-overlapping width-2 max pool; identity when M < 2 (odd tails drop)."""
    n, c, m = x.shape
    if m < 2:
        return x, None
    m2 = m // 2
    xr = x[:, :, :2 * m2].reshape(n, c, m2, 2)
    idx = xr.argmax(axis=3)
    y = np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(dy, cache):
    if cache is None:
        return dy
    idx, x_shape = cache
    n, c, m = x_shape
    m2 = m // 2
    dxr = np.zeros((n, c, m2, 2))
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=3)
    dx = np.zeros((n, c, m))
    dx[:, :, :2 * m2] = dxr.reshape(n, c, 2 * m2)
    return dx


def adaptive_avgpool_forward(x, width):
    """Average-pool to a fixed output width; bins follow the usual
    floor/ceil rule so they cover the input and overlap when M < width."""
    n, c, m = x.shape
    starts = (np.arange(width) * m) // width
    ends = np.ceil((np.arange(width) + 1) * m / width).astype(int)
    y = np.empty((n, c, width))
    for j in range(width):
        y[:, :, j] = x[:, :, starts[j]:ends[j]].mean(axis=2)
    return y, (starts, ends, x.shape)


def adaptive_avgpool_backward(dy, cache):
    starts, ends, x_shape = cache
    dx = np.zeros(x_shape)
    for j in range(len(starts)):
        dx[:, :, starts[j]:ends[j]] += dy[:, :, j:j + 1] / (ends[j] - starts[j])
    return dx


def dense_forward(x, w, b):
    """x: (N, F_in); w: (F_out, F_in); b: (F_out,)."""
    return x @ w.T + b, x


def dense_backward(dy, cache, w):
    x = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; returns (loss, d loss / d logits)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n
