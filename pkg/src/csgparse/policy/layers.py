"""Forward/backward kernels for the layers of the parser network.

Arrays are float64 and channels-last: images are ``(B, H, W, C)`` and
volumes ``(B, X, Y, Z, C)``. Every ``*_forward`` returns the output together
with whatever its ``*_backward`` needs.
"""
from __future__ import annotations

import itertools

import numpy as np


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ------------------------------------------------------------------ conv

def conv_offsets(ndim: int, k: int) -> list[tuple[int, ...]]:
    return list(itertools.product(range(k), repeat=ndim))


def _window(offset, spatial):
    return (slice(None),) + tuple(slice(o, o + s) for o, s in zip(offset, spatial)) + (slice(None),)


def conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, k: int = 3):
    """Zero-padded 'same' convolution, stride 1. ``W`` is ``(k**nd, C_in, C_out)``."""
    nd = x.ndim - 2
    pad = k // 2
    xp = np.pad(x, [(0, 0)] + [(pad, pad)] * nd + [(0, 0)])
    spatial = x.shape[1:-1]
    out = np.empty(x.shape[:-1] + (W.shape[-1],))
    out[...] = b
    for i, off in enumerate(conv_offsets(nd, k)):
        out += xp[_window(off, spatial)] @ W[i]
    return out, xp


def conv_backward(gout: np.ndarray, xp: np.ndarray, W: np.ndarray, k: int = 3, need_dx: bool = True):
    nd = gout.ndim - 2
    pad = k // 2
    spatial = gout.shape[1:-1]
    c_in, c_out = W.shape[1], W.shape[2]
    g2 = gout.reshape(-1, c_out)
    dW = np.empty_like(W)
    dxp = np.zeros_like(xp) if need_dx else None
    for i, off in enumerate(conv_offsets(nd, k)):
        win = _window(off, spatial)
        dW[i] = xp[win].reshape(-1, c_in).T @ g2
        if need_dx:
            dxp[win] += gout @ W[i].T
    db = g2.sum(axis=0)
    dx = None
    if need_dx:
        dx = dxp[(slice(None),) + (slice(pad, -pad if pad else None),) * nd + (slice(None),)]
    return dx, dW, db


# --------------------------------------------------------------- pooling

def _pool_view(x: np.ndarray):
    nd = x.ndim - 2
    b, c = x.shape[0], x.shape[-1]
    spatial = x.shape[1:-1]
    shape = [b]
    for s in spatial:
        shape += [s // 2, 2]
    shape.append(c)
    v = x.reshape(shape)
    # (B, s1/2, s2/2, ..., C, 2, 2, ...)
    order = [0] + [1 + 2 * i for i in range(nd)] + [len(shape) - 1] + [2 + 2 * i for i in range(nd)]
    v = v.transpose(order)
    return v.reshape(v.shape[: nd + 2] + (2 ** nd,)), order, shape


def maxpool_forward(x: np.ndarray):
    """2x non-overlapping max pooling over every spatial axis."""
    v, order, shape = _pool_view(x)
    arg = v.argmax(axis=-1)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
    return out, (arg, order, shape, x.shape)


def maxpool_backward(gout: np.ndarray, cache):
    arg, order, shape, xshape = cache
    nd = len(xshape) - 2
    g = np.zeros(gout.shape + (2 ** nd,))
    np.put_along_axis(g, arg[..., None], gout[..., None], axis=-1)
    g = g.reshape(gout.shape + (2,) * nd)
    g = g.transpose(np.argsort(order))
    return g.reshape(xshape)


# ------------------------------------------------------------ batch norm

def batchnorm_forward(x, gamma, beta, running, train: bool, momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalisation over batch and spatial axes.

    ``running`` is a dict with ``mean`` and ``var`` arrays, updated in place
    in training mode.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[-1]
        running["mean"] = (1 - momentum) * running["mean"] + momentum * mean
        running["var"] = (1 - momentum) * running["var"] + momentum * var * n / max(n - 1, 1)
    else:
        mean, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return gamma * xhat + beta, (xhat, inv, gamma, train)


def batchnorm_backward(gout, cache):
    xhat, inv, gamma, train = cache
    axes = tuple(range(gout.ndim - 1))
    dgamma = (gout * xhat).sum(axis=axes)
    dbeta = gout.sum(axis=axes)
    dxhat = gout * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    n = gout.size // gout.shape[-1]
    dx = inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# ------------------------------------------------------------------- GRU

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_forward(x, h, Wx, Wh, bx, bh):
    """One GRU step; gate blocks are ordered (reset, update, candidate)."""
    H = h.shape[1]
    gx = x @ Wx + bx
    gh = h @ Wh + bh
    r = sigmoid(gx[:, :H] + gh[:, :H])
    z = sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    ghn = gh[:, 2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * ghn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, ghn)


def gru_backward(dh_new, cache, Wx, Wh, grads):
    """Accumulates into ``grads['Wx'|'Wh'|'bx'|'bh']``; returns (dx, dh)."""
    x, h, r, z, n, ghn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dan = dn * (1.0 - n * n)
    dar = dan * ghn * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dgx = np.concatenate([dar, daz, dan], axis=1)
    dgh = np.concatenate([dar, daz, dan * r], axis=1)
    grads["Wx"] += x.T @ dgx
    grads["bx"] += dgx.sum(axis=0)
    grads["Wh"] += h.T @ dgh
    grads["bh"] += dgh.sum(axis=0)
    return dgx @ Wx.T, dh_new * z + dgh @ Wh.T


# ----------------------------------------------------------------- misc

def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def dropout_mask(rng: np.random.Generator | None, shape, p: float):
    """Inverted-dropout mask, or ``None`` when dropout is inactive."""
    if rng is None or p <= 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)
