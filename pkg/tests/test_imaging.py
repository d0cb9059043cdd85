import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segloc.geometry import PoseSE3, RayGrid, nominal_directions
from segloc.imaging import (AlignedProjector, ProjectionMargins, aligned_project, aligned_project_window,
                            build_visual_view, compute_mask, export_view, interpolate_irregular, load_view,
                            mask_iou, read_pgm, simple_project)
from segloc.oracles import brute_force_project
from segloc.synth import (Primitive, ScanConfig, World, WorldConfig, generate_world, road_trajectory,
                          simulate_scan, stationary_trajectory)


def flat_grid(H=16, W=1024):
    inc = np.linspace(-0.2, 0.2, H)
    dirs = nominal_directions(inc, W)
    z = np.zeros((H, W))
    return RayGrid(dirs, z + 10.0, z, z, inc)


@pytest.fixture(scope="module")
def moving_scan():
    w = generate_world(11, WorldConfig(n_objects=12, road_length=60))
    return simulate_scan(w, road_trajectory(0.0, 60.0, 10.0), 1.0, 0.1, ScanConfig(width=256))


def test_simple_project_examples():
    g = flat_grid()
    assert simple_project([5.0, 0.0, 0.0], g)[1] == 0
    assert simple_project([-5.0, 0.0, 0.0], g)[1] == 512
    a = g.ring_inclinations[5]
    assert simple_project([np.cos(a), 0.0, np.sin(a)], g) == (5, 0)
    # azimuth just below 2*pi rounds to W and wraps to column 0
    assert simple_project([1.0, -1e-6, 0.0], g)[1] == 0


def test_zero_norm_point_rejected():
    g = flat_grid()
    with pytest.raises(ValueError):
        simple_project([0.0, 0.0, 0.0], g)
    with pytest.raises(ValueError):
        aligned_project(np.zeros(3), g)


def test_margins_validated():
    g = flat_grid(H=8, W=64)
    with pytest.raises(ValueError):
        AlignedProjector(g, ProjectionMargins(16, 32))
    with pytest.raises(ValueError):
        AlignedProjector(g, ProjectionMargins(4, 33))


def test_stationary_aligned_equals_simple():
    w = generate_world(4, WorldConfig(n_objects=10, road_length=40))
    traj = stationary_trajectory(PoseSE3(np.eye(3), [10, 0, 1.8]), 0.0, 1.0)
    scan = simulate_scan(w, traj, 0.0, 0.1, ScanConfig(width=256))
    P = scan.grid.points()[scan.grid.ranges > 0]
    r, c = aligned_project(P, scan.grid)
    sr, sc = simple_project(P, scan.grid)
    assert np.array_equal(r, sr) and np.array_equal(c, sc)


def test_moving_point_returns_source_pixel(moving_scan):
    g = moving_scan.grid
    rows, cols = np.nonzero(g.ranges > 0)
    r, c = aligned_project(g.points()[rows, cols], g)
    br, bc = brute_force_project(g.points()[rows, cols], g)
    assert np.array_equal(r, br) and np.array_equal(c, bc)
    assert np.mean((r == rows) & (c == cols)) == 1.0


def test_tree_path_equals_window_scan(moving_scan):
    g = moving_scan.grid
    rng = np.random.default_rng(0)
    P = rng.normal(size=(2000, 3)) * [20, 20, 2]
    a = aligned_project(P, g)
    b = aligned_project_window(P, g)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@given(st.floats(-0.3, 0.3), st.floats(0, 2 * np.pi), st.integers(1, 6), st.integers(1, 40))
@settings(max_examples=60)
def test_windowed_argmin_matches_window_oracle(alpha, beta, mr, mc):
    g = flat_grid(H=16, W=128)
    m = ProjectionMargins(mr, mc)
    p = np.array([np.cos(alpha) * np.cos(beta), np.cos(alpha) * np.sin(beta), np.sin(alpha)])
    r0, c0 = simple_project(p, g)
    best, arg = -np.inf, None
    for r in range(max(r0 - mr, 0), min(r0 + mr, 16)):
        for dc in range(-mc, mc):
            c = (c0 + dc) % 128
            s = g.directions[r, c] @ p
            if s > best or (s == best and (r, c) < arg):
                best, arg = s, (r, c)
    assert AlignedProjector(g, m).project(p) == arg


def box_scan(extra=()):
    box = Primitive(1, "box", (12.0, 0.0), 0.0, (2.0, 3.0, 3.0), (0.5,) * 5, 3)
    traj = stationary_trajectory(PoseSE3(np.eye(3), [0, 0, 1.8]), 0.0, 1.0)
    return simulate_scan(World((box,) + tuple(extra), 0), traj, 0.0, 0.1, ScanConfig(width=512))


def id_image(scan):
    ids = np.full(scan.grid.ranges.shape, -1)
    ids[tuple(scan.pixel_index.T)] = scan.labels
    return ids


def test_stationary_box_mask_matches_id_image():
    scan = box_scan()
    g = scan.grid
    pts = g.pose.apply(g.points()[tuple(scan.pixel_index[scan.labels == 1].T)])
    m = compute_mask(pts, g)
    assert np.array_equal(m.astype(bool), id_image(scan) == 1)


def test_occluded_segment_gives_empty_mask():
    wall = Primitive(2, "box", (6.0, 0.0), 0.0, (0.5, 12.0, 6.0), (0.5,) * 5, 4)
    scan = box_scan([wall])
    assert not np.any(scan.labels == 1)
    # box surface points taken from the unoccluded scene
    free = box_scan()
    pts = free.grid.pose.apply(free.grid.points()[tuple(free.pixel_index[free.labels == 1].T)])
    assert compute_mask(pts, free.grid).sum() > 0
    assert compute_mask(pts, scan.grid).sum() == 0


def test_points_behind_range_excluded():
    scan = box_scan()
    g = scan.grid
    pts = g.points()[tuple(scan.pixel_index[scan.labels == 1].T)]
    pushed = pts * (1 + 0.5 / np.linalg.norm(pts, axis=1))[:, None]
    assert compute_mask(g.pose.apply(pushed), g).sum() == 0
    assert compute_mask(g.pose.apply(pts), g, range_tolerance=1e-9).sum() == len(pts)


def test_mask_subset_of_returns(moving_scan):
    g = moving_scan.grid
    rng = np.random.default_rng(1)
    P = g.pose.apply(g.points()[g.ranges > 0][rng.choice(np.count_nonzero(g.ranges), 500, replace=False)])
    m = compute_mask(P, g)
    assert m.sum() > 0
    assert np.all(g.ranges[m.astype(bool)] > 0)


def test_mask_iou():
    a = np.zeros((4, 4)); a[:2] = 1
    b = np.zeros((4, 4)); b[1:3] = 1
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_interpolation_identity():
    g = flat_grid(H=8, W=64)
    rng = np.random.default_rng(2)
    R = rng.uniform(3, 50, (8, 64))
    I = rng.uniform(0, 1, (8, 64))
    out_i, out_r = interpolate_irregular(g.directions.reshape(-1, 3), R.ravel(), I.ravel(), g.ring_inclinations, 64)
    assert np.array_equal(out_i, I) and np.array_equal(out_r, R)


def test_interpolation_two_sample_midpoint():
    inc = np.linspace(-0.2, 0.2, 5)
    W = 64
    b0, d = 2 * np.pi * 10 / W, 0.3 * 2 * np.pi / W
    a = inc[2]
    D = [[np.cos(a) * np.cos(b), np.cos(a) * np.sin(b), np.sin(a)] for b in (b0 - d, b0 + d)]
    out_i, out_r = interpolate_irregular(D, [5.0, 7.0], [0.0, 1.0], inc, W)
    assert out_i[2, 10] == pytest.approx(0.5, abs=1e-12)
    assert out_r[2, 10] == pytest.approx(6.0, abs=1e-12)
    assert np.count_nonzero(out_r) == 1


def test_interpolation_empty_quadrant_is_no_return():
    inc = np.linspace(-0.2, 0.2, 5)
    a = inc[2]
    D = [[np.cos(a), 0.0, np.sin(a)]]
    out_i, out_r = interpolate_irregular(D, [5.0], [0.3], inc, 64)
    assert out_r[2, 0] == 5.0
    assert np.count_nonzero(out_r) == 1
    out_i, out_r = interpolate_irregular(np.zeros((0, 3)), [], [], inc, 64)
    assert not out_r.any()


@given(st.integers(0, 1000))
@settings(max_examples=10)
def test_interpolation_linear_field(seed):
    rng = np.random.default_rng(seed)
    H, W = 16, 128
    inc = np.linspace(-0.25, 0.25, H)
    da, db = inc[1] - inc[0], 2 * np.pi / W
    A, B = np.meshgrid(inc, db * np.arange(W), indexing="ij")
    A = np.stack([A] * 3) + rng.uniform(-0.45, 0.45, (3,) + A.shape) * da
    B = np.stack([B] * 3) + rng.uniform(-0.45, 0.45, (3,) + B.shape) * db
    f = lambda a, b: 1.0 + 3.0 * a - 0.7 * b
    D = np.stack([np.cos(A) * np.cos(B), np.cos(A) * np.sin(B), np.sin(A)], -1).reshape(-1, 3)
    out_i, out_r = interpolate_irregular(D, (20 + 5 * A).ravel(), f(A, np.mod(B, 2 * np.pi)).ravel(), inc, W)
    ga, gb = np.meshgrid(inc, db * np.arange(W), indexing="ij")
    ok = out_r > 0
    ok[:, :2] = ok[:, -2:] = False  # field is discontinuous at the azimuth seam
    assert ok.sum() > 0.4 * H * W
    assert np.abs(out_i[ok] - f(ga, gb)[ok]).max() <= 1e-6
    assert np.abs(out_r[ok] - (20 + 5 * ga)[ok]).max() <= 1e-6


def test_visual_view_and_export(tmp_path, moving_scan):
    g = moving_scan.grid
    with pytest.raises(ValueError):
        build_visual_view(g, np.zeros((3, 3)))
    zero = build_visual_view(g, np.zeros(g.ranges.shape))
    assert zero.mask_area == 0
    m = np.zeros(g.ranges.shape, dtype=np.uint8)
    m.ravel()[np.flatnonzero(g.ranges)[:50]] = 1
    v = build_visual_view(g, m)
    assert v.mask_area == 50
    export_view(tmp_path, v, "v")
    back = load_view(tmp_path, "v")
    for name in ("intensity", "range", "mask"):
        assert np.array_equal(getattr(back, name), getattr(v, name))
    assert back.timestamp == v.timestamp
    assert np.array_equal(read_pgm(tmp_path / "v_mask.pgm"), m.astype(np.int64) * 255)
    r16 = read_pgm(tmp_path / "v_range.pgm")
    assert np.abs(r16 * 0.004 - np.asarray(v.range)).max() <= 0.002 + 1e-12
