"""Pure-numpy reference implementations of the hot kernels.

Shapes: activations are (rows, features) float64, gains/biases are (features,),
optimizer state is flat 1-D. All functions are allocation-honest (outputs are
fresh arrays) except ``adamw_update`` which mutates in place.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return gy * (cdf + x * pdf)


def softmax_rows_fwd(scores):
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd(probs, gy):
    inner = (gy * probs).sum(axis=1, keepdims=True)
    return probs * (gy - inner)


def layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def layernorm_bwd(x, gain, mean, rstd, gy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gbias = gy.sum(axis=0)
    ggain = (gy * xhat).sum(axis=0)
    gxhat = gy * gain
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, ggain, gbias


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    """Decoupled-weight-decay Adam step, in place on flat float64 views."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    update = (m / bc1) / (np.sqrt(v / bc2) + eps) + wd * p
    p -= lr * update
