"""Quick oracle suites behind ``segloc selftest``."""
from __future__ import annotations

from typing import List, Tuple

import numpy as np

Result = Tuple[str, bool, str]


def check_projection(seed: int = 0, speed: float = 10.0, width: int = 256) -> Result:
    from .imaging import AlignedProjector
    from .oracles import brute_force_project
    from .synth import ScanConfig, WorldConfig, generate_world, road_trajectory, simulate_scan

    world = generate_world(seed, WorldConfig(n_objects=12, road_length=60.0))
    traj = road_trajectory(0.0, 40.0, speed)
    scan = simulate_scan(world, traj, 1.0, 0.1, ScanConfig(width=width))
    P = scan.grid.points()[scan.grid.ranges > 0]
    r, c = AlignedProjector(scan.grid).project(P)
    br, bc = brute_force_project(P, scan.grid)
    bad = int(np.count_nonzero((r != br) | (c != bc)))
    return "projection vs brute force", bad == 0, f"{len(P)} points, {bad} mismatches"


def check_gradient(seed: int = 0) -> Result:
    from .nn.model import ModelConfig, init_params
    from .nn.train import gradient_check

    rng = np.random.default_rng(seed)
    params = init_params(ModelConfig(n_classes=3, image_height=32, image_width=64), seed, np.float64)
    vox = rng.random((2, 32, 32, 16))
    vis = rng.normal(size=(2, 3, 32, 64))
    vis[:, 2] = rng.random((2, 32, 64)) < 0.3
    r = gradient_check(params, vox, vis, [0, 2], n_params=200, seed=seed)
    ok = r.n_checked >= 200 and r.max_rel_error < 1e-4
    return "gradient check", ok, f"{r.n_checked} params, max rel err {r.max_rel_error:.3g}"


def check_knn(seed: int = 0, n_db: int = 300, n_queries: int = 100) -> Result:
    from .localization import SegmentDB, knn_query
    from .oracles import linear_scan_knn

    rng = np.random.default_rng(seed)
    D = rng.normal(size=(n_db, 64))
    sids = rng.integers(0, n_db // 2, size=n_db)
    seqs = rng.integers(0, 3, size=n_db)
    db = SegmentDB()
    for i in range(n_db):
        db.add(int(sids[i]), D[i], np.zeros(3), int(seqs[i]), float(i))
    bad = 0
    for q in rng.normal(size=(n_queries, 64)):
        for k in (1, 2, 25):
            got = [(m.target_index, m.target_id) for m in knn_query(db, q, k, exclude_sequence=1)]
            want = [(i, s) for i, s, _ in linear_scan_knn(D, sids, seqs, q, k, exclude_sequence=1)]
            bad += got != want
    return "kNN vs linear scan", bad == 0, f"{n_queries} queries x 3 k, {bad} mismatches"


def check_consistency(seed: int = 0) -> Result:
    from .localization import consistency_clustering
    from .oracles import max_consistent_subsets
    from .geometry import PoseSE3
    from scipy.spatial.transform import Rotation

    rng = np.random.default_rng(seed)
    T = PoseSE3(Rotation.random(random_state=seed).as_matrix(), rng.uniform(-20, 20, 3))
    q_true = rng.uniform(0, 100, (6, 3))
    Q = np.concatenate([q_true, rng.uniform(0, 100, (14, 3))])
    Tt = np.concatenate([T.apply(q_true), rng.uniform(0, 100, (14, 3))])
    got = consistency_clustering(Q, Tt, 0.4, 4)
    best = max_consistent_subsets(Q, Tt, 0.4)
    ok = got == list(range(6)) and best == [tuple(range(6))]
    return "consistency clustering vs exhaustive", ok, f"got {got}, exhaustive {best}"


def run_all(seed: int = 0) -> List[Result]:
    return [check_projection(seed), check_gradient(seed), check_knn(seed), check_consistency(seed)]
