"""Hot numeric kernels for agglomerative clustering.

The merge loop dominates clustering runtime, so it ships in two
interchangeable implementations: a numba ``@njit`` kernel and a pure-numpy
fallback. Selection order: explicit ``engine`` argument, then the
``REVIEWCLEAN_NUMBA`` environment variable (``0``/``false``/``off``
disables numba), then availability. Both paths perform the same
floating-point operations in the same order and produce bitwise-identical
merge sequences; ``benchmarks/bench_clustering.py`` compares their speed.

Linkage semantics: average linkage via the Lance-Williams update
``d(a+b, c) = (|a| d(a,c) + |b| d(b,c)) / (|a| + |b|)``, merging the pair
with the smallest distance, ties broken by the lexicographically smallest
slot pair. Slots are original point indices, so a cluster's slot is always
its smallest member index.
"""

from __future__ import annotations

import os

import numpy as np

ENV_FLAG = "REVIEWCLEAN_NUMBA"

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def numba_available() -> bool:
    return _HAVE_NUMBA


def engine_from_env() -> str:
    flag = os.environ.get(ENV_FLAG, "").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return "numpy"
    return "numba" if _HAVE_NUMBA else "numpy"


def resolve_engine(engine=None) -> str:
    if engine is None:
        return engine_from_env()
    if engine not in ("numba", "numpy"):
        raise ValueError(f"engine must be 'numba' or 'numpy', got {engine!r}")
    if engine == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba requested but not importable")
    return engine


def average_linkage_merges(dist: np.ndarray, k: int, engine=None):
    """Run the merge loop from singletons down to ``k`` clusters.

    ``dist`` is a symmetric (n, n) distance matrix; the diagonal is
    ignored. Returns (merge_a, merge_b, merge_dist, slot_of_point) where
    each merge folds slot ``b`` into slot ``a`` (a < b) at the recorded
    linkage distance, and ``slot_of_point`` maps every point to its final
    cluster slot.
    """
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if dist.ndim != 2 or dist.shape[1] != n:
        raise ValueError("dist must be a square matrix")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    work = dist.copy()
    np.fill_diagonal(work, np.inf)
    if resolve_engine(engine) == "numba":
        return _merge_numba(work, k)
    return _merge_numpy(work, k)


@njit(cache=True)
def _merge_numba(D, k):
    n = D.shape[0]
    steps = n - k
    merge_a = np.empty(steps, dtype=np.int64)
    merge_b = np.empty(steps, dtype=np.int64)
    merge_d = np.empty(steps, dtype=np.float64)
    slot_of_point = np.arange(n)
    active = np.ones(n, dtype=np.bool_)
    size = np.ones(n, dtype=np.float64)

    nearest = np.empty(n, dtype=np.float64)
    nearest_idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        best_j = -1
        for j in range(n):
            if D[i, j] < best:
                best = D[i, j]
                best_j = j
        nearest[i] = best
        nearest_idx[i] = best_j

    for step in range(steps):
        best = np.inf
        best_i = -1
        for i in range(n):
            if active[i] and nearest[i] < best:
                best = nearest[i]
                best_i = i
        j = nearest_idx[best_i]
        a = best_i if best_i < j else j
        b = j if best_i < j else best_i
        merge_a[step] = a
        merge_b[step] = b
        merge_d[step] = best

        sa = size[a]
        sb = size[b]
        for kk in range(n):
            if active[kk] and kk != a and kk != b:
                d_new = (sa * D[a, kk] + sb * D[b, kk]) / (sa + sb)
                D[a, kk] = d_new
                D[kk, a] = d_new
        size[a] = sa + sb
        active[b] = False
        for kk in range(n):
            D[b, kk] = np.inf
            D[kk, b] = np.inf
        D[a, a] = np.inf

        for p in range(n):
            if slot_of_point[p] == b:
                slot_of_point[p] = a

        for kk in range(n):
            if not active[kk]:
                continue
            if kk == a or nearest_idx[kk] == a or nearest_idx[kk] == b:
                row_best = np.inf
                row_idx = -1
                for j2 in range(n):
                    if D[kk, j2] < row_best:
                        row_best = D[kk, j2]
                        row_idx = j2
                nearest[kk] = row_best
                nearest_idx[kk] = row_idx
            else:
                dak = D[a, kk]
                if dak < nearest[kk] or (dak == nearest[kk] and a < nearest_idx[kk]):
                    nearest[kk] = dak
                    nearest_idx[kk] = a

    return merge_a, merge_b, merge_d, slot_of_point


def _merge_numpy(D, k):
    n = D.shape[0]
    steps = n - k
    merge_a = np.empty(steps, dtype=np.int64)
    merge_b = np.empty(steps, dtype=np.int64)
    merge_d = np.empty(steps, dtype=np.float64)
    slot_of_point = np.arange(n)
    active = np.ones(n, dtype=bool)
    size = np.ones(n, dtype=np.float64)
    indices = np.arange(n)

    nearest = D.min(axis=1)
    nearest_idx = D.argmin(axis=1)

    for step in range(steps):
        vals = np.where(active, nearest, np.inf)
        best_i = int(np.argmin(vals))
        best = vals[best_i]
        j = int(nearest_idx[best_i])
        a, b = (best_i, j) if best_i < j else (j, best_i)
        merge_a[step] = a
        merge_b[step] = b
        merge_d[step] = best

        sa, sb = size[a], size[b]
        others = active.copy()
        others[a] = False
        others[b] = False
        D[a, others] = (sa * D[a, others] + sb * D[b, others]) / (sa + sb)
        D[others, a] = D[a, others]
        size[a] = sa + sb
        active[b] = False
        D[b, :] = np.inf
        D[:, b] = np.inf
        D[a, a] = np.inf

        slot_of_point[slot_of_point == b] = a

        rescan = active & ((indices == a) | (nearest_idx == a) | (nearest_idx == b))
        rows = indices[rescan]
        if rows.size:
            sub = D[rows]
            nearest[rows] = sub.min(axis=1)
            nearest_idx[rows] = sub.argmin(axis=1)
        rest = indices[active & ~rescan]
        if rest.size:
            dak = D[a, rest]
            take = (dak < nearest[rest]) | (
                (dak == nearest[rest]) & (a < nearest_idx[rest])
            )
            chosen = rest[take]
            nearest[chosen] = dak[take]
            nearest_idx[chosen] = a

    return merge_a, merge_b, merge_d, slot_of_point
