"""Agreement between the numba and numpy kernel backends.

Both implement identical IEEE double math; results must match to rounding
on random inputs regardless of which backend the package selected.
"""

import numpy as np
import pytest

from trajehr.kernels import numpy_backend as np_k

try:
    from trajehr.kernels import numba_backend as nb_k
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb_k = None

pytestmark = pytest.mark.skipif(nb_k is None, reason="numba unavailable")

RNG = np.random.default_rng(7)


def test_gelu_agreement():
    x = RNG.normal(size=(17, 9)) * 3
    gy = RNG.normal(size=(17, 9))
    np.testing.assert_allclose(nb_k.gelu_fwd(x), np_k.gelu_fwd(x), rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(nb_k.gelu_bwd(x, gy), np_k.gelu_bwd(x, gy), rtol=1e-14, atol=1e-15)


def test_softmax_agreement_with_mask_underflow():
    scores = RNG.normal(size=(8, 12)) * 5
    scores[:, 3] += np.finfo(np.float64).min
    a = nb_k.softmax_rows_fwd(scores)
    b = np_k.softmax_rows_fwd(scores)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-16)
    assert (a[:, 3] == 0.0).all() and (b[:, 3] == 0.0).all()
    gy = RNG.normal(size=(8, 12))
    np.testing.assert_allclose(nb_k.softmax_rows_bwd(a, gy), np_k.softmax_rows_bwd(b, gy), rtol=1e-12, atol=1e-16)


def test_layernorm_agreement():
    x = RNG.normal(size=(11, 16))
    gain = RNG.normal(size=16)
    bias = RNG.normal(size=16)
    gy = RNG.normal(size=(11, 16))
    ya, ma, ra = nb_k.layernorm_fwd(x, gain, bias, 1e-5)
    yb, mb, rb = np_k.layernorm_fwd(x, gain, bias, 1e-5)
    np.testing.assert_allclose(ya, yb, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(ma, mb, rtol=1e-13)
    np.testing.assert_allclose(ra, rb, rtol=1e-13)
    for got, want in zip(nb_k.layernorm_bwd(x, gain, ma, ra, gy), np_k.layernorm_bwd(x, gain, mb, rb, gy)):
        np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-13)


def test_adamw_agreement():
    n = 257
    p1 = RNG.normal(size=n)
    p2 = p1.copy()
    g = RNG.normal(size=n)
    m1, v1 = np.zeros(n), np.zeros(n)
    m2, v2 = np.zeros(n), np.zeros(n)
    for t in range(1, 4):
        bc1 = 1.0 - 0.9**t
        bc2 = 1.0 - 0.999**t
        nb_k.adamw_update(p1, g, m1, v1, 1e-2, 0.9, 0.999, 1e-8, 0.01, bc1, bc2)
        np_k.adamw_update(p2, g, m2, v2, 1e-2, 0.9, 0.999, 1e-8, 0.01, bc1, bc2)
    np.testing.assert_allclose(p1, p2, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(m1, m2, rtol=1e-14)
    np.testing.assert_allclose(v1, v2, rtol=1e-14)
