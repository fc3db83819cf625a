"""Hot numeric kernels with selectable backend.

Two interchangeable implementations live here: ``numba_backend`` (JIT-fused
loops, the default when numba imports) and ``numpy_backend`` (pure numpy).
Selection happens once at import via the ``TRAJEHR_BACKEND`` environment
variable: ``auto`` (default), ``numba``, or ``numpy``. Both backends compute
the same IEEE double-precision math; ``benchmarks/kernels.py`` times them
against each other and checks agreement.
"""

import os

BACKEND_ENV = "TRAJEHR_BACKEND"

_choice = os.environ.get(BACKEND_ENV, "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(f"{BACKEND_ENV} must be one of auto/numba/numpy, got {_choice!r}")

if _choice == "numpy":
    from . import numpy_backend as _impl
    _active = "numpy"
else:
    try:
        from . import numba_backend as _impl
        _active = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        from . import numpy_backend as _impl
        _active = "numpy"


def active_backend() -> str:
    return _active


gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_rows_fwd = _impl.softmax_rows_fwd
softmax_rows_bwd = _impl.softmax_rows_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
adamw_update = _impl.adamw_update
