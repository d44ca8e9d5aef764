"""Time each hot kernel under the jitted and pure-numpy backends.

Shapes mirror one real fine-tuning step of the default model (batch 60,
sequence 64, width 64, feed-forward 256): the attention softmax sees
batch x heads x seq rows, the feed-forward activation sees batch x seq
rows of feed-forward width, and the optimizer update touches one
adapter-sized flat parameter.  Each kernel is warmed up first so jit
compilation never pollutes a measurement; the table reports the best
wall-clock time over the repeats.

Run from the repository root::

    python benchmarks/bench_kernels.py [--repeats N] [--scale X]
"""

import argparse
import time

import numpy as np

from tinyembed.kernels import numpy_backend

try:
    from tinyembed.kernels import numba_backend
except ImportError:  # pragma: no cover - depends on the environment
    numba_backend = None


def best_time(fn, repeats):
    """Best of ``repeats`` wall-clock timings, in milliseconds."""
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return 1000.0 * best


def build_cases(scale):
    """(name, callable-factory) pairs; the factory binds one backend module."""
    rng = np.random.default_rng(0)
    batch, heads, seq, width, ff = 60, 4, 64, 64, 256
    rows = int(batch * seq * scale)
    attn_rows = int(batch * heads * seq * scale)

    x_ff = rng.normal(size=(rows, ff))
    g_ff = rng.normal(size=(rows, ff))
    x_attn = rng.normal(size=(attn_rows, seq)) * 4
    y_attn = numpy_backend.softmax_fwd(x_attn)
    g_attn = rng.normal(size=(attn_rows, seq))
    x_ln = rng.normal(size=(rows, width))
    gamma = rng.normal(size=width)
    beta = rng.normal(size=width)
    _, mean, rstd = numpy_backend.layernorm_fwd(x_ln, gamma, beta, 1e-5)
    g_ln = rng.normal(size=(rows, width))
    x_l2 = rng.normal(size=(batch, width)) + 0.2
    y_l2, norms = numpy_backend.l2norm_fwd(x_l2)
    g_l2 = rng.normal(size=(batch, width))
    x_lse = rng.normal(size=(batch, 2 * batch))
    lse = numpy_backend.logsumexp_fwd(x_lse)
    g_lse = rng.normal(size=batch)
    ids = rng.integers(0, 260, size=rows).astype(np.int64)
    g_emb = rng.normal(size=(rows, width))
    p = rng.normal(size=8192)
    g_p = rng.normal(size=8192)

    def cases_for(backend):
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        return {
            "gelu_fwd": lambda: backend.gelu_fwd(x_ff),
            "gelu_bwd": lambda: backend.gelu_bwd(x_ff, g_ff),
            "softmax_fwd": lambda: backend.softmax_fwd(x_attn),
            "softmax_bwd": lambda: backend.softmax_bwd(y_attn, g_attn),
            "logsumexp_fwd": lambda: backend.logsumexp_fwd(x_lse),
            "logsumexp_bwd": lambda: backend.logsumexp_bwd(x_lse, lse, g_lse),
            "layernorm_fwd": lambda: backend.layernorm_fwd(x_ln, gamma, beta, 1e-5),
            "layernorm_bwd": lambda: backend.layernorm_bwd(x_ln, gamma, mean, rstd, g_ln),
            "l2norm_fwd": lambda: backend.l2norm_fwd(x_l2),
            "l2norm_bwd": lambda: backend.l2norm_bwd(y_l2, norms, g_l2),
            "embedding_grad": lambda: backend.embedding_grad(ids, g_emb, 260),
            "adamw_update": lambda: backend.adamw_update(
                p.copy(), g_p, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001
            ),
        }

    return cases_for


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timings per kernel; the best is reported (default 5)")
    parser.add_argument("--scale", type=float, default=1.0,
                        help="multiplier on the row counts (default 1.0)")
    args = parser.parse_args()

    cases_for = build_cases(args.scale)
    numpy_cases = cases_for(numpy_backend)
    numba_cases = cases_for(numba_backend) if numba_backend is not None else None

    if numba_cases is None:
        print("jitted backend unavailable (numba not importable); timing numpy only\n")
    else:
        for fn in numba_cases.values():
            fn()  # trigger jit compilation outside the timed region

    header = f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, numpy_fn in numpy_cases.items():
        numpy_ms = best_time(numpy_fn, args.repeats)
        if numba_cases is None:
            print(f"{name:<16} {numpy_ms:>10.3f} {'-':>10} {'-':>8}")
            continue
        numba_ms = best_time(numba_cases[name], args.repeats)
        print(f"{name:<16} {numpy_ms:>10.3f} {numba_ms:>10.3f} {numpy_ms / numba_ms:>7.2f}x")


if __name__ == "__main__":
    main()
