"""Numba-JIT implementations of the hot kernels.

Same contracts as ``numpy_backend``; loops are fused to avoid numpy
temporaries on the small matrices this model runs at. ``fastmath`` stays off
so that masked softmax underflows to exactly zero and results stay
reproducible across backends to rounding.
"""

import math

import numpy as np
from numba import njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def gelu_fwd(x):
    n, d = x.shape
    y = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return y


@njit(cache=True)
def gelu_bwd(x, gy):
    n, d = x.shape
    gx = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
            pdf = math.exp(-0.5 * v * v) * _INV_SQRT2PI
            gx[i, j] = gy[i, j] * (cdf + v * pdf)
    return gx


@njit(cache=True)
def softmax_rows_fwd(scores):
    n, d = scores.shape
    probs = np.empty((n, d))
    for i in range(n):
        m = scores[i, 0]
        for j in range(1, d):
            if scores[i, j] > m:
                m = scores[i, j]
        total = 0.0
        for j in range(d):
            e = math.exp(scores[i, j] - m)
            probs[i, j] = e
            total += e
        inv = 1.0 / total
        for j in range(d):
            probs[i, j] *= inv
    return probs


@njit(cache=True)
def softmax_rows_bwd(probs, gy):
    n, d = probs.shape
    gx = np.empty((n, d))
    for i in range(n):
        inner = 0.0
        for j in range(d):
            inner += gy[i, j] * probs[i, j]
        for j in range(d):
            gx[i, j] = probs[i, j] * (gy[i, j] - inner)
    return gx


@njit(cache=True)
def layernorm_fwd(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty((n, d))
    mean = np.empty(n)
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - mu
            var += diff * diff
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
    return y, mean, rstd


@njit(cache=True)
def layernorm_bwd(x, gain, mean, rstd, gy):
    n, d = x.shape
    gx = np.empty((n, d))
    ggain = np.zeros(d)
    gbias = np.zeros(d)
    for i in range(n):
        mu = mean[i]
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - mu) * r
            gxhat = gy[i, j] * gain[j]
            ggain[j] += gy[i, j] * xhat
            gbias[j] += gy[i, j]
            m1 += gxhat
            m2 += gxhat * xhat
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (x[i, j] - mu) * r
            gxhat = gy[i, j] * gain[j]
            gx[i, j] = r * (gxhat - m1 - xhat * m2)
    return gx, ggain, gbias


@njit(cache=True)
def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    n = p.shape[0]
    for i in range(n):
        gi = g[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        p[i] -= lr * (mhat / (math.sqrt(vhat) + eps) + wd * p[i])
