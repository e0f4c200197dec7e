"""Forward/backward kernels on NHWC arrays.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Kernels follow the dtype of
their inputs, so the same code serves float32 training and float64
gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Same-padded ``k x k`` patches of ``x`` as a ``(N*H*W, k*k*C)`` matrix."""
    n, h, w, c = x.shape
    if k == 1:
        return x.reshape(n * h * w, c)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 zero-padded cross-correlation.

    Parameters
    ----------
    x : (N, H, W, Cin)
    w : (k, k, Cin, Cout) with k in {1, 3}
    b : (Cout,)
    """
    k, k2, cin, cout = w.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"unsupported kernel {w.shape[:2]}")
    if x.shape[-1] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {cin}")
    n, h, wd, _ = x.shape
    cols = _im2col(x, k)
    out = cols @ w.reshape(k * k * cin, cout)
    out += b
    return out.reshape(n, h, wd, cout), (x.shape, cols, w)


def conv_backward(dout: np.ndarray, cache, need_dx: bool = True):
    xshape, cols, w = cache
    n, h, wd, cin = xshape
    k, _, _, cout = w.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    if k == 1:
        return (d2 @ w.reshape(cin, cout).T).reshape(xshape), dw, db
    # input gradient of a same-padded odd kernel is the same-padded
    # correlation of dout with the spatially flipped, channel-swapped kernel
    wf = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
    dx = _im2col(dout, k) @ wf
    return dx.reshape(xshape), dw, db


def tconv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """2x2 stride-2 transpose convolution; doubles height and width.

    ``out[n, 2i+a, 2j+c, o] = sum_ci x[n, i, j, ci] * w[a, c, ci, o] + b[o]``
    """
    if w.shape[:2] != (2, 2):
        raise ValueError("transpose convolution kernel must be 2x2")
    n, h, wd, cin = x.shape
    if cin != w.shape[2]:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {w.shape[2]}")
    cout = w.shape[3]
    wm = w.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    x2 = x.reshape(-1, cin)
    y = (x2 @ wm).reshape(n, h, wd, 2, 2, cout)
    out = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * wd, cout) + b
    return out, (x2, x.shape, w)


def tconv_backward(dout: np.ndarray, cache):
    x2, xshape, w = cache
    n, h, wd, cin = xshape
    cout = w.shape[3]
    dy = dout.reshape(n, h, 2, wd, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
    wm = w.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    dx = (dy @ wm.T).reshape(xshape)
    dw = (x2.T @ dy).reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3)
    db = dout.reshape(-1, cout).sum(axis=0)
    return dx, dw, db


def relu_forward(x: np.ndarray):
    out = np.maximum(x, 0)
    return out, out > 0


def relu_backward(dout: np.ndarray, cache):
    return dout * cache


def maxpool_forward(x: np.ndarray):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool_backward(dout: np.ndarray, cache):
    shape, idx = cache
    n, h, w, c = shape
    blocks = np.zeros(idx.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def concat_forward(xs):
    return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]


def concat_backward(dout: np.ndarray, sizes):
    return np.split(dout, np.cumsum(sizes)[:-1], axis=-1)
