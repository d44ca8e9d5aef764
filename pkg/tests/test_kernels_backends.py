"""Agreement between the jitted and pure-numpy kernel backends.

The two implementations share formulas but not reduction order, so outputs
are compared to tight float64 tolerances rather than bit-for-bit.  Backend
selection happens at import time from TINYEMBED_BACKEND, which is exercised
in a subprocess.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from tinyembed import kernels
from tinyembed.kernels import numpy_backend

numba_backend = pytest.importorskip(
    "tinyembed.kernels.numba_backend", reason="jitted backend needs numba"
)

RTOL = 1e-12
ATOL = 1e-12


def pair(rng, shape):
    return np.ascontiguousarray(rng.normal(size=shape))


class TestKernelParity:
    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_gelu_forward_and_backward(self):
        for _ in range(5):
            x = pair(self.rng, (16, 32)) * 3
            g = pair(self.rng, (16, 32))
            np.testing.assert_allclose(
                numba_backend.gelu_fwd(x), numpy_backend.gelu_fwd(x), rtol=RTOL, atol=ATOL
            )
            np.testing.assert_allclose(
                numba_backend.gelu_bwd(x, g), numpy_backend.gelu_bwd(x, g),
                rtol=RTOL, atol=ATOL,
            )

    def test_softmax_forward_and_backward(self):
        for _ in range(5):
            x = pair(self.rng, (12, 20)) * 10
            y_n = numba_backend.softmax_fwd(x)
            y_p = numpy_backend.softmax_fwd(x)
            np.testing.assert_allclose(y_n, y_p, rtol=RTOL, atol=ATOL)
            g = pair(self.rng, (12, 20))
            np.testing.assert_allclose(
                numba_backend.softmax_bwd(y_p, g), numpy_backend.softmax_bwd(y_p, g),
                rtol=RTOL, atol=ATOL,
            )

    def test_logsumexp_forward_and_backward(self):
        for _ in range(5):
            x = pair(self.rng, (10, 30)) * 5
            l_n = numba_backend.logsumexp_fwd(x)
            l_p = numpy_backend.logsumexp_fwd(x)
            np.testing.assert_allclose(l_n, l_p, rtol=RTOL, atol=ATOL)
            g = pair(self.rng, (10,))
            np.testing.assert_allclose(
                numba_backend.logsumexp_bwd(x, l_p, g),
                numpy_backend.logsumexp_bwd(x, l_p, g),
                rtol=RTOL, atol=ATOL,
            )

    def test_layernorm_forward_and_backward(self):
        for _ in range(5):
            x = pair(self.rng, (8, 24)) * 2 + 1
            gamma = pair(self.rng, (24,))
            beta = pair(self.rng, (24,))
            y_n, m_n, r_n = numba_backend.layernorm_fwd(x, gamma, beta, 1e-5)
            y_p, m_p, r_p = numpy_backend.layernorm_fwd(x, gamma, beta, 1e-5)
            np.testing.assert_allclose(y_n, y_p, rtol=RTOL, atol=ATOL)
            np.testing.assert_allclose(m_n, m_p, rtol=RTOL, atol=ATOL)
            np.testing.assert_allclose(r_n, r_p, rtol=RTOL, atol=ATOL)
            g = pair(self.rng, (8, 24))
            for got, want in zip(
                numba_backend.layernorm_bwd(x, gamma, m_p, r_p, g),
                numpy_backend.layernorm_bwd(x, gamma, m_p, r_p, g),
            ):
                np.testing.assert_allclose(got, want, rtol=RTOL, atol=ATOL)

    def test_l2norm_forward_and_backward(self):
        for _ in range(5):
            x = pair(self.rng, (9, 15)) + 0.3
            y_n, n_n = numba_backend.l2norm_fwd(x)
            y_p, n_p = numpy_backend.l2norm_fwd(x)
            np.testing.assert_allclose(y_n, y_p, rtol=RTOL, atol=ATOL)
            np.testing.assert_allclose(n_n, n_p, rtol=RTOL, atol=ATOL)
            g = pair(self.rng, (9, 15))
            np.testing.assert_allclose(
                numba_backend.l2norm_bwd(y_p, n_p, g),
                numpy_backend.l2norm_bwd(y_p, n_p, g),
                rtol=RTOL, atol=ATOL,
            )

    def test_embedding_grad_accumulates_identically(self):
        ids = self.rng.integers(0, 50, size=200).astype(np.int64)
        g = pair(self.rng, (200, 8))
        np.testing.assert_allclose(
            numba_backend.embedding_grad(ids, g, 50),
            numpy_backend.embedding_grad(ids, g, 50),
            rtol=RTOL, atol=ATOL,
        )

    def test_adamw_update_state_evolution(self):
        p0 = pair(self.rng, (64,))
        state_n = [p0.copy(), np.zeros(64), np.zeros(64)]
        state_p = [p0.copy(), np.zeros(64), np.zeros(64)]
        beta1, beta2, eps, wd = 0.9, 0.999, 1e-8, 0.01
        for t in range(1, 11):
            g = pair(self.rng, (64,))
            bc1 = 1.0 - beta1**t
            bc2 = 1.0 - beta2**t
            numba_backend.adamw_update(
                state_n[0], g, state_n[1], state_n[2], 1e-3,
                beta1, beta2, eps, wd, bc1, bc2,
            )
            numpy_backend.adamw_update(
                state_p[0], g, state_p[1], state_p[2], 1e-3,
                beta1, beta2, eps, wd, bc1, bc2,
            )
        for got, want in zip(state_n, state_p):
            np.testing.assert_allclose(got, want, rtol=RTOL, atol=ATOL)


class TestBackendSelection:
    def _probe(self, env_value):
        env = dict(os.environ)
        if env_value is None:
            env.pop("TINYEMBED_BACKEND", None)
        else:
            env["TINYEMBED_BACKEND"] = env_value
        return subprocess.run(
            [sys.executable, "-c",
             "from tinyembed.kernels import BACKEND_NAME; print(BACKEND_NAME)"],
            capture_output=True, text=True, env=env,
        )

    def test_active_backend_is_one_of_the_two(self):
        assert kernels.BACKEND_NAME in ("numba", "numpy")

    def test_forcing_numpy(self):
        proc = self._probe("numpy")
        assert proc.returncode == 0
        assert proc.stdout.strip() == "numpy"

    def test_forcing_numba(self):
        proc = self._probe("numba")
        assert proc.returncode == 0
        assert proc.stdout.strip() == "numba"

    def test_auto_picks_something(self):
        proc = self._probe(None)
        assert proc.returncode == 0
        assert proc.stdout.strip() in ("numba", "numpy")

    def test_unknown_value_is_rejected(self):
        proc = self._probe("cuda")
        assert proc.returncode != 0
        assert "BackendError" in proc.stderr
