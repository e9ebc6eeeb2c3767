"""Hot numeric kernels: numba-jitted with a pure-numpy fallback.

Backend selection: numba is used when importable unless the environment
variable ARVLAB_DISABLE_NUMBA is set to a non-empty value. Both paths
compute in the same operation order so results agree bit-for-bit for the
codebook scan and to rounding for the rollout.
"""

from __future__ import annotations

import os
import time

import numpy as np

_DISABLED = bool(os.environ.get("ARVLAB_DISABLE_NUMBA", ""))

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec(args[0]) if args and callable(args[0]) else dec


def backend_name() -> str:
    return "numba" if HAS_NUMBA else "numpy"


# -- nearest-codebook scan ---------------------------------------------------


@njit(cache=True)
def _nearest_codebook_loop(z, codebook):
    n = z.shape[0]
    m = codebook.shape[0]
    d = z.shape[1]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        best_d2 = np.inf
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = z[i, k] - codebook[j, k]
                acc += diff * diff
            if acc < best_d2:  # strict: ties keep the lowest index
                best_d2 = acc
                best = j
        out[i] = best
    return out


def _nearest_codebook_numpy(z, codebook):
    d2 = ((z[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1).astype(np.int64)


def nearest_codebook(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the closest codebook entry per row; ties break low."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    codebook = np.ascontiguousarray(codebook, dtype=np.float64)
    if z.shape[1] != codebook.shape[1]:
        raise ValueError("latent dimension mismatch with codebook")
    if HAS_NUMBA:
        return _nearest_codebook_loop(z, codebook)
    return _nearest_codebook_numpy(z, codebook)


# -- linear error rollout ----------------------------------------------------


@njit(cache=True)
def _error_rollout_loop(A, eps0, deltas):
    steps = deltas.shape[0]
    d = A.shape[0]
    norms = np.empty(steps + 1)
    eps = eps0.copy()
    norms[0] = np.sqrt((eps * eps).sum())
    nxt = np.empty(d)
    for t in range(steps):
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += A[i, j] * eps[j]
            nxt[i] = acc + deltas[t, i]
        eps[:] = nxt
        norms[t + 1] = np.sqrt((eps * eps).sum())
    return norms


def _error_rollout_numpy(A, eps0, deltas):
    steps = deltas.shape[0]
    norms = np.empty(steps + 1)
    eps = eps0.copy()
    norms[0] = np.linalg.norm(eps)
    for t in range(steps):
        eps = A @ eps + deltas[t]
        norms[t + 1] = np.linalg.norm(eps)
    return norms


def error_rollout(A: np.ndarray, eps0: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Norms of eps_t under eps_{t+1} = A eps_t + delta_t; length steps+1."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    eps0 = np.ascontiguousarray(eps0, dtype=np.float64)
    deltas = np.ascontiguousarray(deltas, dtype=np.float64)
    if HAS_NUMBA:
        return _error_rollout_loop(A, eps0, deltas)
    return _error_rollout_numpy(A, eps0, deltas)


# -- benchmark ---------------------------------------------------------------


def benchmark_kernels(reps: int = 20, seed: int = 0) -> list[dict]:
    """Time each kernel on both backends (numba rows only when available)."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4096, 8))
    cb = rng.normal(size=(256, 8))
    A = rng.normal(size=(16, 16)) * 0.2
    eps0 = rng.normal(size=16)
    deltas = rng.normal(size=(512, 16)) * 0.01

    cases = [
        ("nearest_codebook", "numpy", lambda: _nearest_codebook_numpy(z, cb)),
        ("error_rollout", "numpy", lambda: _error_rollout_numpy(A, eps0, deltas)),
    ]
    if HAS_NUMBA:
        cases += [
            ("nearest_codebook", "numba", lambda: _nearest_codebook_loop(z, cb)),
            ("error_rollout", "numba", lambda: _error_rollout_loop(A, eps0, deltas)),
        ]
    rows = []
    for name, backend, fn in cases:
        fn()  # warmup / JIT compile
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        times = np.array(times)
        rows.append(
            {
                "kernel": name,
                "backend": backend,
                "mean_ms": float(times.mean() * 1e3),
                "std_ms": float(times.std() * 1e3),
                "reps": reps,
            }
        )
    return rows
