# Dense NCHW kernels with hand-written backward passes.
# Convolution goes through an explicit im2col matrix so forward and the
# weight gradient share one copy of the patches.

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d_forward(x, w, b, stride, pad):
    """Returns the output and the im2col matrix needed by :func:`conv2d_backward`."""
    n = x.shape[0]
    o, c, k, _ = w.shape
    cols, ho, wo = im2col(x, k, stride, pad)
    out = cols @ w.reshape(o, c * k * k).T
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = out + b.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out), cols


def conv2d_backward(dy, cols, x_shape, w, stride, pad, need_dx=True):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dw = (dy_mat.T @ cols).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db
    if stride == 1 and pad <= k - 1:
        # dx is the full correlation of dy with the spatially flipped kernel
        q = k - 1 - pad
        dyp = np.pad(dy, ((0, 0), (0, 0), (q, q), (q, q))) if q else dy
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = conv2d_forward(dyp, wf, np.zeros(c, dtype=dy.dtype), 1, 0)
        return dx, dw, db
    # [k, k, n, c, ho, wo] contiguous so each scatter below reads one dense block
    dcols = np.ascontiguousarray((dy_mat @ w.reshape(o, c * k * k)).reshape(n, ho, wo, c, k, k).transpose(4, 5, 0, 3, 1, 2))
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[i, j]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def conv2d_ordered(x, w, b, stride, pad):
    """Convolution accumulated tap by tap in a fixed (channel, row, column) order.

    Slower than :func:`conv2d_forward`, but its rounding does not depend on
    how many channels a layer has, so dropping channels that contribute exact
    zeros leaves every remaining output bit unchanged.
    """
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.empty((n, o, ho, wo), dtype=np.result_type(x, w))
    out[...] = b.reshape(1, o, 1, 1)
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                tap = x[:, None, ci, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
                out += w[:, ci, i, j].reshape(1, o, 1, 1) * tap
    return out


def tconv2d_ordered(x, w, b, stride, pad):
    """Transposed convolution with the same fixed accumulation order as :func:`conv2d_ordered`."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    hf, wf = (h - 1) * stride + k, (wd - 1) * stride + k
    full = np.zeros((n, o, hf, wf), dtype=np.result_type(x, w))
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                full[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (wd - 1) + 1 : stride] += (
                    w[:, ci, i, j].reshape(1, o, 1, 1) * x[:, None, ci]
                )
    out = full[:, :, pad : hf - pad, pad : wf - pad] if pad else full
    return np.ascontiguousarray(out + b.reshape(1, o, 1, 1))


def tconv2d_forward(x, w, b, stride, pad):
    """Transposed convolution; ``w`` is ``[out, in, k, k]``."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xm = x.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    wm = w.transpose(1, 0, 2, 3).reshape(c, o * k * k)
    contrib = (xm @ wm).reshape(n, h, wd, o, k, k).transpose(0, 3, 1, 2, 4, 5)
    hf, wf = (h - 1) * stride + k, (wd - 1) * stride + k
    full = np.zeros((n, o, hf, wf), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (wd - 1) + 1 : stride] += contrib[..., i, j]
    out = full[:, :, pad : hf - pad, pad : wf - pad] if pad else full
    out = out + b.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out), xm


def tconv2d_backward(dy, xm, x_shape, w, stride, pad, need_dx=True):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    hf, wf = (h - 1) * stride + k, (wd - 1) * stride + k
    if pad:
        dfull = np.zeros((n, o, hf, wf), dtype=dy.dtype)
        dfull[:, :, pad : hf - pad, pad : wf - pad] = dy
    else:
        dfull = dy
    dcontrib = np.empty((n, h, wd, o, k, k), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dcontrib[..., i, j] = dfull[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (wd - 1) + 1 : stride].transpose(0, 2, 3, 1)
    dmat = dcontrib.reshape(n * h * wd, o * k * k)
    wm = w.transpose(1, 0, 2, 3).reshape(c, o * k * k)
    dw = (xm.T @ dmat).reshape(c, o, k, k).transpose(1, 0, 2, 3)
    db = dy.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, np.ascontiguousarray(dw), db
    dx = (dmat @ wm.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def batchnorm_train_forward(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    return out, (xhat, inv_std, mean, var)


def batchnorm_train_backward(dy, gamma, ctx):
    xhat, inv_std, _, _ = ctx
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma.reshape(1, -1, 1, 1)
    dx = (inv_std.reshape(1, -1, 1, 1) / m) * (
        m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx, dgamma, dbeta


def batchnorm_eval_forward(x, gamma, beta, mean, var, eps):
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    return gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1), (xhat, inv_std)


def batchnorm_eval_backward(dy, gamma, ctx):
    xhat, inv_std = ctx
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dx = dy * (gamma * inv_std).reshape(1, -1, 1, 1)
    return dx, dgamma, dbeta


def log_softmax(z, axis):
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))
