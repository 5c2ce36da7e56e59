"""Pure-numpy reference implementations of the hot numeric kernels.

Every function here has a jitted twin in :mod:`discorel.kernels.numba_ops`
with the same signature and semantics. These are the fallback path and the
ground truth for the backend parity tests.
"""

import numpy as np

# tanh-approximation GELU constants
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, dy):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layer_norm_fwd(x, gain, bias, eps):
    """Row-wise layer norm over the last axis of a 2-d array.

    Returns (y, xhat, inv_std); xhat and inv_std are needed by the backward.
    """
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def layer_norm_bwd(dy, xhat, inv_std, gain):
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv_std[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def softmax_fwd(scores):
    """Row-wise softmax of a 2-d array. Masked entries are expected to carry
    a large negative additive bias already."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(probs, dprobs):
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def ce_fwd(logits, targets):
    """Per-row cross entropy from raw logits. Returns (loss_rows, probs)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1)
    probs = e / z[:, None]
    rows = np.arange(logits.shape[0])
    losses = np.log(z) - shifted[rows, targets]
    return losses, probs


def ce_bwd(probs, targets, weights):
    """d(sum_i w_i * loss_i)/dlogits."""
    d = probs * weights[:, None]
    rows = np.arange(probs.shape[0])
    d[rows, targets] -= weights
    return d


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, t):
    """In-place decoupled-weight-decay Adam step with bias correction."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)


def embedding_bwd(ids, dx, d_emb):
    """Scatter-add dx rows into the embedding gradient, in place.

    Sequential accumulation order: repeated ids must sum deterministically.
    """
    np.add.at(d_emb, ids, dx)
