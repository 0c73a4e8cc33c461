"""Counter-based random variates built on the splitmix64 finalizer.

Every variate is a pure function of a 64-bit stream key and a counter, so
datasets and replication seeds can be reproduced bit-for-bit from documented
(key, counter) layouts without tracking generator state.  Normals come from
the inverse CDF (one uniform per normal), keeping the per-unit variate
consumption fixed.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

# uniforms are ((z >> 11) + 0.5) * 2**-53, strictly inside (0, 1)
_U_SHIFT = np.uint64(11)
_U_SCALE = 2.0 ** -53


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 output finalizer (operates on uint64, wraps mod 2^64)."""
    z = z.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _MIX1
        z ^= z >> np.uint64(27)
        z *= _MIX2
        z ^= z >> np.uint64(31)
    return z


def substream(key: int | np.ndarray, index: int | np.ndarray) -> np.ndarray:
    """Key of the ``index``-th substream of ``key``.

    Identical to the ``index``-th raw output of a splitmix64 generator seeded
    with ``key``, so deriving keys and drawing values are the same primitive.
    Broadcasts over array arguments.
    """
    k = np.asarray(key, dtype=np.uint64)
    i = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        step = k + (i + np.uint64(1)) * _GOLDEN
    return _mix64(step)


def derive_key(key: int, *indices: int) -> int:
    """Fold ``indices`` into ``key`` one substream level at a time."""
    k = np.uint64(int(key) & 0xFFFFFFFFFFFFFFFF)
    for i in indices:
        k = substream(k, np.uint64(int(i) & 0xFFFFFFFFFFFFFFFF))
    return int(k)


def uniforms(key: int | np.ndarray, index: int | np.ndarray) -> np.ndarray:
    """Uniform(0, 1) variates at the given counters, endpoints excluded."""
    z = substream(key, index)
    return ((z >> _U_SHIFT).astype(np.float64) + 0.5) * _U_SCALE


def normals(key: int | np.ndarray, index: int | np.ndarray) -> np.ndarray:
    """Standard normal variates via the inverse CDF of `uniforms`."""
    return ndtri(uniforms(key, index))


def variate_matrix(key: int, n_rows: int, n_cols: int) -> np.ndarray:
    """n_rows x n_cols uniforms; row i uses substream(key, i), counters 0..n_cols-1.

    Row i is the documented variate layout for "unit i" of a dataset keyed by
    ``key``: callers assign fixed meanings to the columns.
    """
    row_keys = substream(np.uint64(key), np.arange(n_rows, dtype=np.uint64))
    z = substream(row_keys[:, None], np.arange(n_cols, dtype=np.uint64)[None, :])
    return ((z >> _U_SHIFT).astype(np.float64) + 0.5) * _U_SCALE


def sample_without_replacement(key: int, n: int, k: int) -> np.ndarray:
    """First ``k`` entries of a Fisher-Yates shuffle of range(n), sorted.

    Uses uniforms from ``key`` at counters 0..k-1; consumption depends only
    on (n, k), never on data values.
    """
    if not 0 <= k <= n:
        raise ValueError(f"cannot sample {k} of {n} items")
    pool = np.arange(n)
    u = uniforms(np.uint64(key), np.arange(k, dtype=np.uint64))
    for j in range(k):
        swap = j + int(u[j] * (n - j))
        pool[j], pool[swap] = pool[swap], pool[j]
    out = pool[:k]
    out.sort()
    return out
