"""Numpy implementations of the numeric kernels.

Fallback for the compiled extension; signatures mirror ``_kernels.pyx``
exactly. All inputs are C-contiguous float64 arrays (int64 for index
arguments) and all reductions run over the trailing axis.
"""

import numpy as np

_SQRT_2_OVER_PI = 0.7978845608028654
_GELU_C = 0.044715

COMPILED = False


def layer_norm_fwd(x, gain, bias, eps):
    """Normalize rows of x; returns (y, xhat, inv_std) for the backward pass."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[:, None]
    return xhat * gain + bias, xhat, inv_std


def layer_norm_bwd(g, xhat, inv_std, gain):
    ggain = np.einsum("rd,rd->d", g, xhat)
    gbias = g.sum(axis=0)
    gh = g * gain
    m1 = gh.mean(axis=1, keepdims=True)
    m2 = np.mean(gh * xhat, axis=1, keepdims=True)
    gx = inv_std[:, None] * (gh - m1 - xhat * m2)
    return gx, ggain, gbias


def gelu_fwd(x):
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, g):
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x * x * x)
    t = np.tanh(u)
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_bwd(y, g):
    s = np.sum(g * y, axis=1, keepdims=True)
    return y * (g - s)


def log_softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return z - lse


def log_softmax_bwd(y, g):
    return g - np.exp(y) * g.sum(axis=1, keepdims=True)


def cross_entropy_fwd(logits, labels):
    """Mean negative log-likelihood; also returns softmax probs for backward."""
    ls = log_softmax_fwd(logits)
    n = logits.shape[0]
    loss = -ls[np.arange(n), labels].mean()
    return loss, np.exp(ls)


def cross_entropy_bwd(probs, labels, gout):
    n = probs.shape[0]
    gl = probs.copy()
    gl[np.arange(n), labels] -= 1.0
    gl *= gout / n
    return gl


def embedding_grad(ids, g, vocab_size):
    """Scatter-add rows of g into a fresh (vocab_size, dim) gradient table."""
    out = np.zeros((vocab_size, g.shape[1]))
    np.add.at(out, ids, g)
    return out
