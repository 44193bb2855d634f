"""Pure-numpy fallback for the compiled kernels in ``_ckernels.pyx``.

Same call signatures and return conventions; arrays are C-contiguous and
either float32 or float64.
"""
import numpy as np
from scipy.special import erf

_INV_SQRT_2PI = 0.3989422804014327
_SQRT1_2 = 0.7071067811865476


def gelu_forward(x):
    xd = x.astype(np.float64)
    return (0.5 * xd * (1.0 + erf(xd * _SQRT1_2))).astype(x.dtype)


def gelu_backward(x, g):
    xd = x.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return (g * (cdf + xd * pdf)).astype(x.dtype)


def softmax_forward(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(a.dtype)


def softmax_backward(y, g):
    dot = (g * y).sum(axis=1, keepdims=True)
    return (y * (g - dot)).astype(y.dtype)


def layernorm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((x - mean) * rstd).astype(x.dtype)
    out = (xhat * gamma + beta).astype(x.dtype)
    return out, xhat, rstd[:, 0].astype(x.dtype)


def layernorm_backward(g, xhat, rstd, gamma):
    gh = g * gamma
    s1 = gh.mean(axis=1, keepdims=True)
    s2 = (gh * xhat).mean(axis=1, keepdims=True)
    dx = (rstd[:, None] * (gh - s1 - xhat * s2)).astype(g.dtype)
    dgamma = (g * xhat).sum(axis=0, dtype=np.float64).astype(g.dtype)
    dbeta = g.sum(axis=0, dtype=np.float64).astype(g.dtype)
    return dx, dgamma, dbeta


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """In-place AdamW step; ``step`` is 1-based."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    p -= (lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)).astype(p.dtype)
