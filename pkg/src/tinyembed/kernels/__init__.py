"""Backend selection for the hot numeric kernels.

Two interchangeable implementations exist: a numba-jitted one
(``numba_backend``) and a pure-numpy one (``numpy_backend``).  The active
backend is chosen once at import time from the ``TINYEMBED_BACKEND``
environment variable:

    TINYEMBED_BACKEND=numba   force the jitted kernels (error if numba missing)
    TINYEMBED_BACKEND=numpy   force the vectorized numpy kernels
    unset / "auto"            numba when importable, numpy otherwise

Both backends implement the same functions with the same elementwise
formulas; only summation order may differ, so results agree to float64
rounding but are not guaranteed bit-identical across backends.  Within a
backend every kernel is deterministic (serial, fixed reduction order).
Dense linear algebra is delegated to numpy's BLAS in both backends.

Run ``python benchmarks/bench_kernels.py`` to compare the two.
"""

import os

__all__ = [
    "BACKEND_NAME",
    "gelu_fwd",
    "gelu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "logsumexp_fwd",
    "logsumexp_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "l2norm_fwd",
    "l2norm_bwd",
    "embedding_grad",
    "adamw_update",
]


class BackendError(RuntimeError):
    """Requested kernel backend cannot be used."""


def _load_backend():
    choice = os.environ.get("TINYEMBED_BACKEND", "auto").strip().lower() or "auto"
    if choice not in ("auto", "numba", "numpy"):
        raise BackendError(
            f"TINYEMBED_BACKEND={choice!r} is not one of 'auto', 'numba', 'numpy'"
        )
    if choice in ("auto", "numba"):
        try:
            from . import numba_backend as backend

            return backend, "numba"
        except ImportError:
            if choice == "numba":
                raise BackendError(
                    "TINYEMBED_BACKEND=numba but numba is not importable"
                ) from None
    from . import numpy_backend as backend

    return backend, "numpy"


_backend, BACKEND_NAME = _load_backend()

gelu_fwd = _backend.gelu_fwd
gelu_bwd = _backend.gelu_bwd
softmax_fwd = _backend.softmax_fwd
softmax_bwd = _backend.softmax_bwd
logsumexp_fwd = _backend.logsumexp_fwd
logsumexp_bwd = _backend.logsumexp_bwd
layernorm_fwd = _backend.layernorm_fwd
layernorm_bwd = _backend.layernorm_bwd
l2norm_fwd = _backend.l2norm_fwd
l2norm_bwd = _backend.l2norm_bwd
embedding_grad = _backend.embedding_grad
adamw_update = _backend.adamw_update
