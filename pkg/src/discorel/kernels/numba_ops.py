"""Jitted twins of the kernels in numpy_ops, one nopython loop per kernel.

Kept serial on purpose: every reduction runs in a fixed order, so results
are bit-stable across runs and across thread counts.
"""

import math

import numpy as np
from numba import njit

_GELU_C = 0.7978845608028654
_GELU_A = 0.044715


@njit(cache=True)
def gelu_fwd(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        xi = flat[i]
        u = _GELU_C * (xi + _GELU_A * xi * xi * xi)
        out[i] = 0.5 * xi * (1.0 + math.tanh(u))
    return out.reshape(x.shape)


@njit(cache=True)
def gelu_bwd(x, dy):
    flat = x.ravel()
    dflat = dy.ravel()
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        xi = flat[i]
        u = _GELU_C * (xi + _GELU_A * xi * xi * xi)
        t = math.tanh(u)
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xi * xi)
        out[i] = dflat[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
    return out.reshape(x.shape)


@njit(cache=True)
def layer_norm_fwd(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mean
            var += c * c
        var /= d
        istd = 1.0 / math.sqrt(var + eps)
        inv_std[i] = istd
        for j in range(d):
            h = (x[i, j] - mean) * istd
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, inv_std


@njit(cache=True)
def layer_norm_bwd(dy, xhat, inv_std, gain):
    n, d = dy.shape
    dx = np.empty_like(dy)
    dgain = np.zeros(d, dtype=dy.dtype)
    dbias = np.zeros(d, dtype=dy.dtype)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dgain[j] += dy[i, j] * xhat[i, j]
            dbias[j] += dy[i, j]
            dh = dy[i, j] * gain[j]
            m1 += dh
            m2 += dh * xhat[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dh = dy[i, j] * gain[j]
            dx[i, j] = inv_std[i] * (dh - m1 - xhat[i, j] * m2)
    return dx, dgain, dbias


@njit(cache=True)
def softmax_fwd(scores):
    n, k = scores.shape
    out = np.empty_like(scores)
    for i in range(n):
        mx = scores[i, 0]
        for j in range(1, k):
            if scores[i, j] > mx:
                mx = scores[i, j]
        z = 0.0
        for j in range(k):
            e = math.exp(scores[i, j] - mx)
            out[i, j] = e
            z += e
        for j in range(k):
            out[i, j] /= z
    return out


@njit(cache=True)
def softmax_bwd(probs, dprobs):
    n, k = probs.shape
    out = np.empty_like(probs)
    for i in range(n):
        inner = 0.0
        for j in range(k):
            inner += dprobs[i, j] * probs[i, j]
        for j in range(k):
            out[i, j] = probs[i, j] * (dprobs[i, j] - inner)
    return out


@njit(cache=True)
def ce_fwd(logits, targets):
    n, v = logits.shape
    probs = np.empty_like(logits)
    losses = np.empty(n, dtype=logits.dtype)
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > mx:
                mx = logits[i, j]
        z = 0.0
        for j in range(v):
            e = math.exp(logits[i, j] - mx)
            probs[i, j] = e
            z += e
        for j in range(v):
            probs[i, j] /= z
        losses[i] = math.log(z) - (logits[i, targets[i]] - mx)
    return losses, probs


@njit(cache=True)
def ce_bwd(probs, targets, weights):
    n, v = probs.shape
    d = np.empty_like(probs)
    for i in range(n):
        w = weights[i]
        for j in range(v):
            d[i, j] = probs[i, j] * w
        d[i, targets[i]] -= w
    return d


@njit(cache=True)
def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, t):
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i in range(pf.shape[0]):
        gi = gf[i]
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * gi
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * gi * gi
        mhat = mf[i] / c1
        vhat = vf[i] / c2
        pf[i] -= lr * (mhat / (math.sqrt(vhat) + eps) + wd * pf[i])


@njit(cache=True)
def embedding_bwd(ids, dx, d_emb):
    n, d = dx.shape
    for i in range(n):
        row = ids[i]
        for j in range(d):
            d_emb[row, j] += dx[i, j]
