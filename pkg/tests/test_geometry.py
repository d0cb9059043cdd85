import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from segloc.geometry import (Completeness, Descriptor, PoseSE3, RayGrid, ScanPoints, Segment, VisualView,
                             completeness, compose, nominal_directions)


def random_pose(seed):
    rng = np.random.default_rng(seed)
    return PoseSE3(Rotation.random(random_state=seed).as_matrix(), rng.uniform(-50, 50, 3), float(seed))


seeds = st.integers(0, 2**31 - 1)


def test_identity_compose():
    I = PoseSE3.identity()
    c = compose(I, I)
    assert np.array_equal(c.rotation, np.eye(3)) and np.array_equal(c.translation, np.zeros(3))


def test_translation_compose():
    a = PoseSE3(np.eye(3), [1, 0, 0])
    b = PoseSE3(np.eye(3), [0, 2, 0])
    assert np.allclose(compose(a, b).translation, [1, 2, 0])


@given(seeds)
def test_pose_times_inverse_is_identity(seed):
    T = random_pose(seed)
    c = compose(T, T.inverse())
    assert np.abs(c.rotation - np.eye(3)).max() < 1e-9
    assert np.abs(c.translation).max() < 1e-9


@given(seeds, seeds, seeds)
def test_compose_associative(a, b, c):
    A, B, C = random_pose(a), random_pose(b), random_pose(c)
    l = compose(compose(A, B), C)
    r = compose(A, compose(B, C))
    assert np.abs(l.rotation - r.rotation).max() < 1e-9
    assert np.abs(l.translation - r.translation).max() < 1e-9


@given(seeds, seeds)
def test_compose_matches_matrices(a, b):
    A, B = random_pose(a), random_pose(b)
    assert np.allclose(compose(A, B).matrix(), A.matrix() @ B.matrix(), atol=1e-9)


def test_compose_reorthonormalizes_drift():
    R = Rotation.from_rotvec([0.1, 0.2, 0.3]).as_matrix()
    P = PoseSE3(R, np.zeros(3))
    acc = PoseSE3.identity()
    for _ in range(2000):
        acc = compose(acc, P)
    R = acc.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_pose_rejects_reflection():
    with pytest.raises(ValueError):
        PoseSE3(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_scan_points_ring_bound():
    ScanPoints(np.zeros((1, 3)), [0.5], [3], [0.0], height=4)
    with pytest.raises(ValueError):
        ScanPoints(np.zeros((1, 3)), [0.5], [4], [0.0], height=4)


def _grid(H=4, W=8, ranges=None):
    inc = np.linspace(0.1, -0.1, H)
    d = nominal_directions(inc, W)
    r = np.ones((H, W)) * 5 if ranges is None else ranges
    return RayGrid(d, r, np.zeros((H, W)), np.zeros((H, W)), inc)


def test_raygrid_invariants():
    g = _grid()
    assert g.height == 4 and g.width == 8
    inc = np.linspace(0.1, -0.1, 4)
    d = nominal_directions(inc, 8)
    with pytest.raises(ValueError):
        RayGrid(d * 1.01, np.ones((4, 8)), np.zeros((4, 8)), np.zeros((4, 8)), inc)
    with pytest.raises(ValueError):
        RayGrid(d, -np.ones((4, 8)), np.zeros((4, 8)), np.zeros((4, 8)), inc)
    with pytest.raises(ValueError):
        RayGrid(d, np.ones((4, 8)), np.zeros((4, 8)), np.zeros((4, 8)), np.array([0.1, 0.2, 0.0, -0.1]))


def test_nominal_direction_convention():
    d = nominal_directions(np.array([0.0]), 4)
    assert np.allclose(d[0, 0], [1, 0, 0]) and np.allclose(d[0, 1], [0, 1, 0])


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=40))
def test_segment_centroid_is_mean(pts):
    s = Segment(1, np.array(pts))
    assert np.abs(s.centroid - np.mean(pts, axis=0)).max() < 1e-9


def test_segment_observations_monotone():
    Segment(1, np.zeros((3, 3)), ((0.0, 1), (1.0, 3)))
    with pytest.raises(ValueError):
        Segment(1, np.zeros((3, 3)), ((0.0, 3), (1.0, 1)))


def test_visual_view_invariants():
    rng = np.ones((4, 5))
    rng[0, 0] = 0
    m = np.zeros((4, 5), dtype=np.uint8)
    m[1:3, 1:4] = 1
    v = VisualView(np.zeros((4, 5)), rng, m, 1.5)
    assert v.mask_area == 6
    m[0, 0] = 1
    with pytest.raises(ValueError):
        VisualView(np.zeros((4, 5)), rng, m)


def test_descriptor_checks():
    Descriptor(np.zeros(64))
    with pytest.raises(ValueError):
        Descriptor(np.zeros(63))
    bad = np.zeros(64)
    bad[3] = np.nan
    with pytest.raises(ValueError):
        Descriptor(bad)


@pytest.mark.parametrize("n,final,expected", [(50, 100, 0.5), (100, 100, 1.0), (1, 3, 1 / 3)])
def test_completeness_examples(n, final, expected):
    c = completeness(Segment(4, np.zeros((n, 3))), Segment(4, np.zeros((final, 3))))
    assert c.value == pytest.approx(expected, abs=1e-15)


def test_completeness_identity_mismatch():
    with pytest.raises(ValueError, match="segment identity mismatch"):
        completeness(Segment(1, np.zeros((1, 3))), Segment(2, np.zeros((2, 3))))


@given(st.lists(st.integers(1, 50), min_size=1, max_size=20))
def test_completeness_monotone_along_history(increments):
    counts = np.cumsum(increments)
    final = Segment(9, np.zeros((counts[-1], 3)))
    vals = [completeness(Segment(9, np.zeros((n, 3))), final).value for n in counts]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0


def test_completeness_range():
    with pytest.raises(ValueError):
        Completeness(0.0)
    with pytest.raises(ValueError):
        Completeness(1.5)
