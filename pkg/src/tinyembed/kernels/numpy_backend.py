"""Pure-numpy kernel implementations (fallback backend).

All functions take float64 arrays already flattened to the layout the
caller prepared (rows x features for the row-wise kernels) and return new
arrays; nothing here touches the autodiff tape.
"""

import numpy as np

# tanh-form GELU constants
_GELU_K = 0.7978845608028654  # sqrt(2/pi)
_GELU_C = 0.044715


def gelu_fwd(x):
    u = _GELU_K * (x + _GELU_C * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, gout):
    u = _GELU_K * (x + _GELU_C * x * x * x)
    t = np.tanh(u)
    du = _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return gout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_fwd(x):
    # shift by the row max so exp never overflows
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gout):
    dot = (gout * y).sum(axis=1, keepdims=True)
    return y * (gout - dot)


def logsumexp_fwd(x):
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def logsumexp_bwd(x, lse, gout):
    return np.exp(x - lse[:, None]) * gout[:, None]


def layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def layernorm_bwd(x, gamma, mean, rstd, gout):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gx_hat = gout * gamma
    ggamma = (gout * xhat).sum(axis=0)
    gbeta = gout.sum(axis=0)
    gx = rstd[:, None] * (
        gx_hat
        - gx_hat.mean(axis=1, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)
    )
    return gx, ggamma, gbeta


def l2norm_fwd(x):
    norms = np.sqrt((x * x).sum(axis=1))
    return x / norms[:, None], norms


def l2norm_bwd(y, norms, gout):
    dot = (gout * y).sum(axis=1)
    return (gout - y * dot[:, None]) / norms[:, None]


def embedding_grad(ids, gout, vocab_size):
    gtable = np.zeros((vocab_size, gout.shape[1]))
    np.add.at(gtable, ids, gout)
    return gtable


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
