"""Euclidean segmentation (batch and incremental) and voxelization."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import Segment

VOXEL_DIMS = (32, 32, 16)


@dataclass(frozen=True)
class SegmenterConfig:
    radius: float = 0.2
    min_points: int = 100
    ground_z: float = 0.2
    dedup_voxel: float = 0.05
    active_range: Optional[float] = None


def _components(points: np.ndarray, radius: float) -> np.ndarray:
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(g, directed=False)
    return labels


def euclidean_cluster(points, radius: float = 0.2, min_points: int = 100,
                      ground_z: Optional[float] = 0.2) -> List[Segment]:
    """Connected components of the radius graph, ground points removed first.

    Components with fewer than ``min_points`` points are dropped. Ids follow
    the order of each component's smallest point index.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = np.arange(len(P)) if ground_z is None else np.nonzero(P[:, 2] >= ground_z)[0]
    labels = _components(P[keep], radius)
    segs = []
    if len(keep) == 0:
        return segs
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    groups = [g for g in np.split(order, bounds) if len(g) >= min_points]
    groups.sort(key=lambda g: g[0])
    for sid, g in enumerate(groups):
        segs.append(Segment(sid, P[keep[g]]))
    return segs


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    """Packed integer key of the voxel containing each point."""
    q = np.floor(np.asarray(points) / voxel).astype(np.int64) + (1 << 20)
    return (q[:, 0] << 42) | (q[:, 1] << 21) | q[:, 2]


def dedup_first(points: np.ndarray, voxel: float) -> np.ndarray:
    """Indices of the first point in every occupied voxel, in input order."""
    _, first = np.unique(voxel_keys(points, voxel), return_index=True)
    return np.sort(first)


class IncrementalSegmenter:
    """Grows segments scan by scan.

    New points are deduplicated on a voxel grid, then joined to every stored
    point within ``radius``; components bridged by new points merge and keep
    the lower segment id. Components below ``min_points`` are kept as
    candidates, so the partition always equals batch clustering of all
    stored points.
    """

    def __init__(self, config: SegmenterConfig = SegmenterConfig()):
        self.config = config
        self._pts = np.zeros((0, 3))
        self._gt = np.zeros(0, dtype=np.int64)
        self._comp = np.zeros(0, dtype=np.int64)
        self._keys: set = set()
        self._next_comp = 0
        self._comp_sid: Dict[int, int] = {}
        self._next_sid = 0
        self._obs: Dict[int, List] = {}
        self.merged: Dict[int, int] = {}
        self.last_updated: List[int] = []

    @property
    def points(self) -> np.ndarray:
        return self._pts

    @property
    def point_labels(self) -> np.ndarray:
        return self._gt

    def _comp_of_sid(self) -> Dict[int, int]:
        return {s: c for c, s in self._comp_sid.items()}

    def update(self, new_points, timestamp: float = 0.0, labels=None,
               center: Optional[np.ndarray] = None) -> List[int]:
        """Insert one scan worth of map-frame points; returns the ids of the
        segments that grew or merged. ``center`` plus ``config.active_range``
        limit the neighbour search to stored points near the sensor."""
        cfg = self.config
        X = np.asarray(new_points, dtype=np.float64).reshape(-1, 3)
        gt = np.full(len(X), -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
        above = X[:, 2] >= cfg.ground_z
        X, gt = X[above], gt[above]
        first = dedup_first(X, cfg.dedup_voxel) if len(X) else np.zeros(0, dtype=np.int64)
        X, gt = X[first], gt[first]
        keys = voxel_keys(X, cfg.dedup_voxel) if len(X) else np.zeros(0, dtype=np.int64)
        fresh = np.array([k not in self._keys for k in keys.tolist()], dtype=bool)
        X, gt, keys = X[fresh], gt[fresh], keys[fresh]
        self.last_updated = []
        if len(X) == 0:
            return []
        self._keys.update(keys.tolist())

        n_old = len(self._pts)
        if cfg.active_range is not None and center is not None and n_old:
            act = np.nonzero(np.linalg.norm(self._pts - center, axis=1) <= cfg.active_range + cfg.radius)[0]
        else:
            act = np.arange(n_old)
        n = len(X)
        new_tree = cKDTree(X)
        pairs = new_tree.query_pairs(cfg.radius, output_type="ndarray")
        rows = [pairs[:, 0]]
        cols = [pairs[:, 1]]
        old_comps = np.zeros(0, dtype=np.int64)
        if len(act):
            m = new_tree.sparse_distance_matrix(cKDTree(self._pts[act]), cfg.radius, output_type="ndarray")
            if len(m):
                touched = self._comp[act[m["j"]]]
                old_comps, inv = np.unique(touched, return_inverse=True)
                rows.append(m["i"])
                cols.append(n + inv)
        nn = n + len(old_comps)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        g = coo_matrix((np.ones(len(r)), (r, c)), shape=(nn, nn))
        _, lab = connected_components(g, directed=False)

        new_comp = np.empty(n, dtype=np.int64)
        comp_map = {}
        changed = set()
        order = np.argsort(lab, kind="stable")
        bounds = np.flatnonzero(np.diff(lab[order])) + 1
        for members in np.split(order, bounds):
            olds = [int(old_comps[k - n]) for k in members[members >= n]]
            news = members[members < n]
            if olds:
                sids = [self._comp_sid[o] for o in olds if o in self._comp_sid]
                target = min(olds, key=lambda o: (self._comp_sid.get(o, np.iinfo(np.int64).max), o))
                for o in olds:
                    if o != target:
                        comp_map[o] = target
                        self._comp_sid.pop(o, None)
                if sids:
                    self._comp_sid[target] = min(sids)
                    for sid in sids:
                        if sid != min(sids):
                            self.merged[sid] = min(sids)
            else:
                target = self._next_comp
                self._next_comp += 1
            new_comp[news] = target
            changed.add(target)
        if comp_map:
            lut = np.arange(self._next_comp)
            for src, dst in comp_map.items():
                lut[src] = dst
            self._comp = lut[self._comp]

        self._pts = np.concatenate([self._pts, X])
        self._gt = np.concatenate([self._gt, gt])
        self._comp = np.concatenate([self._comp, new_comp])

        # promote grown components to segments; first point index decides order
        counts = np.bincount(self._comp, minlength=self._next_comp)
        promote = [c for c in changed if c not in self._comp_sid and counts[c] >= cfg.min_points]
        if promote:
            first_idx = {c: int(np.argmax(self._comp == c)) for c in promote}
            for c in sorted(promote, key=lambda c: first_idx[c]):
                self._comp_sid[c] = self._next_sid
                self._next_sid += 1
        updated = sorted(self._comp_sid[c] for c in changed if c in self._comp_sid)
        comp_of = self._comp_of_sid()
        for sid in updated:
            c = comp_of[sid]
            self._obs.setdefault(sid, []).append((float(timestamp), int(counts[c])))
        self.last_updated = updated
        return updated

    def resolve(self, sid: int) -> int:
        """Id a segment carries now, following merges."""
        while sid in self.merged:
            sid = self.merged[sid]
        return sid

    def segment_indices(self, sid: int) -> np.ndarray:
        c = self._comp_of_sid()[sid]
        return np.nonzero(self._comp == c)[0]

    def segment_ids(self) -> List[int]:
        return sorted(self._comp_sid.values())

    def majority_label(self, idx: np.ndarray) -> int:
        g = self._gt[idx]
        g = g[g >= 0]
        if len(g) == 0:
            return -1
        vals, counts = np.unique(g, return_counts=True)
        return int(vals[np.argmax(counts)])

    def segment(self, sid: int) -> Segment:
        idx = self.segment_indices(sid)
        obs = self._obs.get(sid, [])
        # a merge can shrink nothing but may reorder history; keep it monotone
        clean, best = [], 0
        for t, n in obs:
            best = max(best, n)
            clean.append((t, best))
        return Segment(sid, self._pts[idx], tuple(clean), self.majority_label(idx))

    def segments(self) -> List[Segment]:
        return [self.segment(s) for s in self.segment_ids()]

    def partition(self) -> List[np.ndarray]:
        """Stored point index sets of all components with >= min_points points."""
        counts = np.bincount(self._comp, minlength=self._next_comp) if len(self._comp) else np.zeros(0, int)
        out = [np.nonzero(self._comp == c)[0] for c in np.nonzero(counts >= self.config.min_points)[0]]
        return sorted(out, key=lambda a: a[0])


# --------------------------------------------------------------------------
# voxelization
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    occupancy: np.ndarray
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=np.float64)
        if occ.min(initial=0.0) < 0 or occ.max(initial=0.0) > 1:
            raise ValueError("occupancy must lie in [0, 1]")
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)


def voxelize(segment, dims=VOXEL_DIMS, default_voxel: float = 0.1) -> VoxelGrid:
    """Occupancy grid centred on the centroid, isotropically scaled to fit.

    The voxel size is the smallest that keeps every point within the grid
    around the centroid; occupancy is the point count per voxel divided by
    the maximum count.
    """
    pts = segment.points if isinstance(segment, Segment) else np.asarray(segment, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("cannot voxelize an empty segment")
    dims_a = np.asarray(dims)
    c = pts.mean(axis=0)
    rel = pts - c
    half = np.abs(rel).max(axis=0)
    size = float(np.max(2.0 * half / dims_a)) * (1.0 + 1e-9)
    if size <= 0:
        size = default_voxel
    idx = np.floor(rel / size + dims_a / 2).astype(np.int64)
    idx = np.clip(idx, 0, dims_a - 1)
    counts = np.zeros(dims)
    np.add.at(counts, (idx[:, 0], idx[:, 1], idx[:, 2]), 1.0)
    occ = counts / counts.max()
    return VoxelGrid(occ, size, c - size * dims_a / 2)


def write_segment_dump(path, segments: Sequence[Segment]) -> None:
    """``segments_%06d.csv`` schema: ``segment_id,x,y,z``."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["segment_id", "x", "y", "z"])
        for s in segments:
            for p in s.points:
                w.writerow([s.id, repr(float(p[0])), repr(float(p[1])), repr(float(p[2]))])


def read_segment_dump(path) -> List[Segment]:
    groups: Dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        if next(reader, None) != ["segment_id", "x", "y", "z"]:
            raise ValueError(f"{path}: malformed header")
        for row in reader:
            groups.setdefault(int(row[0]), []).append([float(v) for v in row[1:4]])
    return [Segment(k, np.array(v)) for k, v in sorted(groups.items())]
