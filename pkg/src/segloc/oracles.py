"""Slow reference implementations used to verify the fast paths."""
from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from .geometry import RayGrid


def brute_force_project(P, grid: RayGrid, chunk: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Global argmax of n_ij . p over all H x W pixels, ties to the smallest (row, col).

    Scores are screened in float32; every pixel within a safe bound of the
    float32 maximum is rescored in float64, so the result is the exact
    float64 argmax.
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    W = grid.width
    flat = grid.directions.reshape(-1, 3)
    flat32 = flat.astype(np.float32)
    norms = np.linalg.norm(P, axis=1)
    out = np.empty(len(P), dtype=np.int64)
    for s in range(0, len(P), chunk):
        pp = P[s:s + chunk]
        S = pp.astype(np.float32) @ flat32.T
        top = S.max(axis=1)
        tol = 1e-5 * norms[s:s + chunk] + 1e-30
        for i in range(len(pp)):
            cand = np.nonzero(S[i] >= top[i] - tol[i])[0]
            exact = flat[cand] @ pp[i]
            out[s + i] = cand[np.nonzero(exact == exact.max())[0][0]]
    return out // W, out % W


def linear_scan_knn(descriptors, segment_ids, sequences, q, k: int, exclude_sequence=None) -> List[Tuple[int, int, float]]:
    """(entry index, segment id, distance) of the k nearest entries, pure Python."""
    q = [float(v) for v in q]
    rows = []
    for i, (d, sid, seq) in enumerate(zip(descriptors, segment_ids, sequences)):
        if exclude_sequence is not None and seq == exclude_sequence:
            continue
        dist = math.sqrt(sum((float(a) - b) ** 2 for a, b in zip(d, q)))
        rows.append((dist, int(sid), i))
    rows.sort()
    return [(i, sid, dist) for dist, sid, i in rows[:k]]


def max_consistent_subsets(q_centroids, t_centroids, epsilon: float) -> List[Tuple[int, ...]]:
    """All largest subsets whose members are pairwise consistent.

    Exhaustive: every consistent subset is reachable by extending a smaller
    one with a higher-index member, and all of them are visited.
    """
    Q = np.asarray(q_centroids, dtype=np.float64)
    T = np.asarray(t_centroids, dtype=np.float64)
    n = len(Q)
    ok = [[abs(math.dist(Q[i], Q[j]) - math.dist(T[i], T[j])) <= epsilon for j in range(n)] for i in range(n)]
    best: List[Tuple[int, ...]] = []
    best_size = 0

    def grow(members: Tuple[int, ...], start: int):
        nonlocal best, best_size
        if len(members) > best_size:
            best, best_size = [members], len(members)
        elif len(members) == best_size and members:
            best.append(members)
        for j in range(start, n):
            if all(ok[i][j] for i in members):
                grow(members + (j,), j + 1)

    grow((), 0)
    return best


def numeric_gradient(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f over every entry of x (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        flat[i] = v + step
        fp = f()
        flat[i] = v - step
        fm = f()
        flat[i] = v
        g.reshape(-1)[i] = (fp - fm) / (2 * step)
    return g
