"""Descriptor database, matching policies, consistency clustering and pose."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Hashable, List, Optional, Sequence

import numpy as np

from .geometry import DESCRIPTOR_DIM, PoseSE3

RATIO_FACTOR = 1.2
EPSILON = 0.4
MIN_CLUSTER = 4
POLICIES = ("25nn", "1nn")


@dataclass(frozen=True)
class MatchCandidate:
    query_id: int
    target_id: int
    distance: float
    rank: int
    target_index: int = -1
    query_index: int = -1

    def __post_init__(self):
        if self.distance < 0 or self.rank < 1:
            raise ValueError("distance must be >= 0 and rank >= 1")


class SegmentDB:
    """Descriptor store with exact Euclidean kNN.

    Each entry is one observation of one segment: (segment id, descriptor,
    centroid, sequence id, timestamp, label). ``(segment id, timestamp)``
    pairs are unique.
    """

    def __init__(self, dim: int = DESCRIPTOR_DIM):
        self.dim = dim
        self._desc = np.zeros((0, dim))
        self._cent = np.zeros((0, 3))
        self._sid = np.zeros(0, dtype=np.int64)
        self._seq = np.zeros(0, dtype=np.int64)
        self._time = np.zeros(0)
        self._label = np.zeros(0, dtype=np.int64)
        self._keys: set = set()
        self._pending: list = []

    def __len__(self) -> int:
        self._flush()
        return len(self._sid)

    def add(self, segment_id: int, descriptor, centroid, sequence: int = 0, timestamp: float = 0.0,
            label: int = -1) -> int:
        d = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        if d.shape != (self.dim,) or not np.all(np.isfinite(d)):
            raise ValueError(f"descriptor must be {self.dim} finite values")
        key = (int(segment_id), float(timestamp))
        if key in self._keys:
            raise ValueError(f"duplicate entry for segment {segment_id} at t={timestamp}")
        self._keys.add(key)
        self._pending.append((d, np.asarray(centroid, dtype=np.float64).reshape(3), int(segment_id),
                              int(sequence), float(timestamp), int(label)))
        return len(self._sid) + len(self._pending) - 1

    def _flush(self):
        if not self._pending:
            return
        d, c, s, q, t, lab = zip(*self._pending)
        self._desc = np.concatenate([self._desc, np.stack(d)])
        self._cent = np.concatenate([self._cent, np.stack(c)])
        self._sid = np.concatenate([self._sid, np.array(s, dtype=np.int64)])
        self._seq = np.concatenate([self._seq, np.array(q, dtype=np.int64)])
        self._time = np.concatenate([self._time, np.array(t)])
        self._label = np.concatenate([self._label, np.array(lab, dtype=np.int64)])
        self._pending = []

    def _column(self, attr):
        self._flush()
        a = getattr(self, attr).view()
        a.setflags(write=False)
        return a

    descriptors = property(lambda self: self._column("_desc"))
    centroids = property(lambda self: self._column("_cent"))
    segment_ids = property(lambda self: self._column("_sid"))
    sequences = property(lambda self: self._column("_seq"))
    timestamps = property(lambda self: self._column("_time"))
    labels = property(lambda self: self._column("_label"))

    def distances(self, q) -> np.ndarray:
        self._flush()
        diff = self._desc - np.asarray(q, dtype=np.float64).reshape(1, -1)
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def ordered(self, q, exclude_sequence: Optional[int] = None):
        """All eligible entry indices sorted by (distance, segment id, index), plus distances."""
        dist = self.distances(q)
        idx = np.arange(len(dist))
        if exclude_sequence is not None:
            idx = idx[self._seq != exclude_sequence]
        order = np.lexsort((idx, self._sid[idx], dist[idx]))
        return idx[order], dist


def knn_query(db: SegmentDB, q, k: int, exclude_sequence: Optional[int] = None,
              query_id: int = -1, query_index: int = -1) -> List[MatchCandidate]:
    """k nearest entries, ascending by distance; ties by segment id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(db) == 0:
        return []
    dist = db.distances(q)
    idx = np.arange(len(dist))
    if exclude_sequence is not None:
        idx = idx[db.sequences != exclude_sequence]
    if len(idx) > k:
        # keep everything tied with the k-th distance so tie-breaking stays exact
        kth = np.partition(dist[idx], k - 1)[k - 1]
        idx = idx[dist[idx] <= kth]
    sid = db.segment_ids
    order = idx[np.lexsort((idx, sid[idx], dist[idx]))][:k]
    return [MatchCandidate(query_id, int(sid[i]), float(dist[i]), r + 1, int(i), query_index)
            for r, i in enumerate(order)]


def ratio_test(candidates: Sequence[MatchCandidate], factor: float = RATIO_FACTOR) -> Optional[MatchCandidate]:
    """Accept the nearest candidate iff d1 * factor < d2; a lone candidate passes."""
    if not candidates:
        return None
    if len(candidates) == 1:
        return candidates[0]
    d1, d2 = candidates[0].distance, candidates[1].distance
    return candidates[0] if d1 * factor < d2 else None


def consistency_graph(q_centroids, t_centroids, epsilon: float = EPSILON) -> np.ndarray:
    Q = np.asarray(q_centroids, dtype=np.float64)
    T = np.asarray(t_centroids, dtype=np.float64)
    dq = np.linalg.norm(Q[:, None] - Q[None], axis=-1)
    dt = np.linalg.norm(T[:, None] - T[None], axis=-1)
    A = np.abs(dq - dt) <= epsilon
    np.fill_diagonal(A, False)
    return A


def consistency_clustering(q_centroids, t_centroids, epsilon: float = EPSILON, min_size: int = MIN_CLUSTER,
                           keys: Optional[Sequence[Hashable]] = None) -> Optional[List[int]]:
    """Greedy mutually consistent subset of matches, or None if too small.

    Matches i and j agree when their centroid distances in the query and the
    target map differ by at most ``epsilon``. Growth starts at the vertex of
    highest degree and visits the rest by (degree desc, key); a vertex joins
    when it agrees with every member. ``keys`` (default: input index) make
    the result independent of input order. Returned indices are sorted by key.
    """
    n = len(q_centroids)
    if n == 0 or n < min_size:
        return None
    keys = list(range(n)) if keys is None else list(keys)
    A = consistency_graph(q_centroids, t_centroids, epsilon)
    deg = A.sum(axis=1)
    order = sorted(range(n), key=lambda i: (-int(deg[i]), keys[i]))
    members = [order[0]]
    ok = A[order[0]].copy()
    for i in order[1:]:
        if ok[i]:
            members.append(i)
            ok &= A[i]
    if len(members) < min_size:
        return None
    return sorted(members, key=lambda i: keys[i])


class DegenerateGeometry(ValueError):
    pass


@dataclass(frozen=True)
class PoseFit:
    pose: PoseSE3
    rms: float


def estimate_pose(query_points, target_points, timestamp: float = 0.0) -> PoseFit:
    """Least-squares rigid transform mapping query points onto target points.

    SVD of the cross-covariance with a determinant guard against
    reflections. Needs at least 3 non-collinear pairs.
    """
    P = np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if len(P) != len(Q):
        raise ValueError("point sets differ in size")
    if len(P) < 3:
        raise DegenerateGeometry("degenerate correspondence geometry")
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mp, Q - mq
    sv = np.linalg.svd(Pc, compute_uv=False)
    scale = max(float(sv[0]), 1e-300)
    if sv[1] <= 1e-9 * scale:
        raise DegenerateGeometry("degenerate correspondence geometry")
    U, _, Vt = np.linalg.svd(Pc.T @ Qc)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    t = mq - R @ mp
    pose = PoseSE3(R, t, timestamp)
    res = pose.apply(P) - Q
    return PoseFit(pose, float(np.sqrt(np.mean(np.sum(res * res, axis=1)))))


@dataclass
class LoopClosure:
    pose: PoseSE3
    inliers: List[MatchCandidate]
    rms: float
    policy: str
    timestamp: float = 0.0
    error: Optional[float] = None
    n_candidates: int = 0

    def __post_init__(self):
        if len(self.inliers) < 1:
            raise ValueError("closure without inliers")


def candidates_for(db: SegmentDB, descriptors, policy: str, k: int = 25, exclude_sequence: Optional[int] = None,
                   query_ids: Optional[Sequence[int]] = None, factor: float = RATIO_FACTOR) -> List[MatchCandidate]:
    """Match candidates of every local descriptor under ``policy``."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    out = []
    for i, d in enumerate(np.asarray(descriptors, dtype=np.float64)):
        qid = int(query_ids[i]) if query_ids is not None else i
        if policy == "25nn":
            out.extend(knn_query(db, d, k, exclude_sequence, qid, i))
        else:
            m = ratio_test(knn_query(db, d, 2, exclude_sequence, qid, i), factor)
            if m is not None:
                out.append(m)
    return out


def localize(descriptors, centroids, db: SegmentDB, policy: str = "1nn", k: int = 25,
             exclude_sequence: Optional[int] = None, query_ids: Optional[Sequence[int]] = None,
             epsilon: float = EPSILON, min_size: int = MIN_CLUSTER, factor: float = RATIO_FACTOR,
             timestamp: float = 0.0) -> Optional[LoopClosure]:
    """Match a local map against the database and estimate the closure pose.

    ``25nn`` passes all k neighbours of every local segment to clustering;
    ``1nn`` keeps only ratio-test survivors among 2 neighbours.
    """
    if len(db) == 0:
        raise ValueError("database is empty")
    cents = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    cands = candidates_for(db, descriptors, policy, k, exclude_sequence, query_ids, factor)
    if len(cands) < min_size:
        return None
    qc = cents[[c.query_index for c in cands]]
    tc = db.centroids[[c.target_index for c in cands]]
    keys = [(c.query_id, c.target_id, c.target_index) for c in cands]
    sel = consistency_clustering(qc, tc, epsilon, min_size, keys)
    if sel is None:
        return None
    try:
        fit = estimate_pose(qc[sel], tc[sel], timestamp)
    except DegenerateGeometry:
        return None
    return LoopClosure(fit.pose, [cands[i] for i in sel], fit.rms, policy, timestamp, None, len(cands))


def closure_error(closure_pose: PoseSE3, true_pose: PoseSE3, sensor_position) -> float:
    """Distance between where the estimated and the true transform put the sensor."""
    p = np.asarray(sensor_position, dtype=np.float64).reshape(1, 3)
    return float(np.linalg.norm(closure_pose.apply(p) - true_pose.apply(p)))


CLOSURE_HEADER = ["timestamp", "tx", "ty", "tz", "err_m", "n_inliers", "policy"]


def write_closure_log(path, closures: Sequence[LoopClosure]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CLOSURE_HEADER)
        for c in closures:
            t = c.pose.translation
            err = "" if c.error is None else repr(float(c.error))
            w.writerow([repr(float(c.timestamp)), repr(float(t[0])), repr(float(t[1])), repr(float(t[2])),
                        err, len(c.inliers), c.policy])


def read_closure_log(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.DictReader(f)
        if r.fieldnames != CLOSURE_HEADER:
            raise ValueError(f"{path}: malformed header")
        return list(r)
