"""Numba-jitted kernel implementations (default backend).

Same formulas as ``numpy_backend`` but as fused serial loops: one pass per
row instead of a chain of numpy temporaries.  Loops stay serial on purpose
so the reduction order is fixed and results are reproducible.
"""

import math

import numpy as np
from numba import njit

_GELU_K = 0.7978845608028654  # sqrt(2/pi)
_GELU_C = 0.044715


@njit(cache=True)
def gelu_fwd(x):
    out = np.empty_like(x)
    flat = x.ravel()
    oflat = out.ravel()
    for i in range(flat.size):
        xi = flat[i]
        t = math.tanh(_GELU_K * (xi + _GELU_C * xi * xi * xi))
        oflat[i] = 0.5 * xi * (1.0 + t)
    return out


@njit(cache=True)
def gelu_bwd(x, gout):
    gx = np.empty_like(x)
    xf = x.ravel()
    gf = gout.ravel()
    of = gx.ravel()
    for i in range(xf.size):
        xi = xf[i]
        t = math.tanh(_GELU_K * (xi + _GELU_C * xi * xi * xi))
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * xi * xi)
        of[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
    return gx


@njit(cache=True)
def softmax_fwd(x):
    rows, cols = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            e = math.exp(x[r, c] - m)
            out[r, c] = e
            s += e
        inv = 1.0 / s
        for c in range(cols):
            out[r, c] *= inv
    return out


@njit(cache=True)
def softmax_bwd(y, gout):
    rows, cols = y.shape
    gx = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += gout[r, c] * y[r, c]
        for c in range(cols):
            gx[r, c] = y[r, c] * (gout[r, c] - dot)
    return gx


@njit(cache=True)
def logsumexp_fwd(x):
    rows, cols = x.shape
    out = np.empty(rows)
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            s += math.exp(x[r, c] - m)
        out[r] = m + math.log(s)
    return out


@njit(cache=True)
def logsumexp_bwd(x, lse, gout):
    rows, cols = x.shape
    gx = np.empty_like(x)
    for r in range(rows):
        for c in range(cols):
            gx[r, c] = math.exp(x[r, c] - lse[r]) * gout[r]
    return gx


@njit(cache=True)
def layernorm_fwd(x, gamma, beta, eps):
    rows, cols = x.shape
    out = np.empty_like(x)
    mean = np.empty(rows)
    rstd = np.empty(rows)
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += x[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = x[r, c] - mu
            var += d * d
        var /= cols
        rs = 1.0 / math.sqrt(var + eps)
        mean[r] = mu
        rstd[r] = rs
        for c in range(cols):
            out[r, c] = (x[r, c] - mu) * rs * gamma[c] + beta[c]
    return out, mean, rstd


@njit(cache=True)
def layernorm_bwd(x, gamma, mean, rstd, gout):
    rows, cols = x.shape
    gx = np.empty_like(x)
    ggamma = np.zeros(cols)
    gbeta = np.zeros(cols)
    for r in range(rows):
        mu = mean[r]
        rs = rstd[r]
        m1 = 0.0  # mean of gout*gamma
        m2 = 0.0  # mean of gout*gamma*xhat
        for c in range(cols):
            xhat = (x[r, c] - mu) * rs
            gh = gout[r, c] * gamma[c]
            m1 += gh
            m2 += gh * xhat
            ggamma[c] += gout[r, c] * xhat
            gbeta[c] += gout[r, c]
        m1 /= cols
        m2 /= cols
        for c in range(cols):
            xhat = (x[r, c] - mu) * rs
            gh = gout[r, c] * gamma[c]
            gx[r, c] = rs * (gh - m1 - xhat * m2)
    return gx, ggamma, gbeta


@njit(cache=True)
def l2norm_fwd(x):
    rows, cols = x.shape
    out = np.empty_like(x)
    norms = np.empty(rows)
    for r in range(rows):
        s = 0.0
        for c in range(cols):
            s += x[r, c] * x[r, c]
        n = math.sqrt(s)
        norms[r] = n
        inv = 1.0 / n
        for c in range(cols):
            out[r, c] = x[r, c] * inv
    return out, norms


@njit(cache=True)
def l2norm_bwd(y, norms, gout):
    rows, cols = y.shape
    gx = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += gout[r, c] * y[r, c]
        inv = 1.0 / norms[r]
        for c in range(cols):
            gx[r, c] = (gout[r, c] - y[r, c] * dot) * inv
    return gx


@njit(cache=True)
def embedding_grad(ids, gout, vocab_size):
    n, d = gout.shape
    gtable = np.zeros((vocab_size, d))
    for i in range(n):
        row = ids[i]
        for c in range(d):
            gtable[row, c] += gout[i, c]
    return gtable


@njit(cache=True)
def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    for i in range(p.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        p[i] -= lr * (mhat / (math.sqrt(vhat) + eps) + weight_decay * p[i])
