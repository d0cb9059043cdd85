import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segloc.geometry import PoseSE3, nominal_directions
from segloc.synth import (GROUND_ID, Primitive, PointRecordError, ScanConfig, World, WorldConfig, generate_world,
                          import_point_records, read_scan_archive, road_trajectory, simulate_scan,
                          stationary_trajectory, write_point_records, write_scan_archive)

SMALL = ScanConfig(width=256)


def box_world(distance=10.0):
    box = Primitive(1, "box", (distance + 1.0, 0.0), 0.0, (2.0, 2.0, 3.0), (0.5,) * 5, 3)
    return World((box,), 0)


def test_empty_world_has_only_ground_plane():
    w = generate_world(1, WorldConfig(n_objects=0))
    assert w.objects == ()
    traj = stationary_trajectory(PoseSE3(np.eye(3), [0, 0, 1.8]), 0.0, 1.0)
    scan = simulate_scan(w, traj, 0.0, 0.1, SMALL)
    assert np.all(scan.labels == GROUND_ID)
    hit = scan.grid.ranges > 0
    # only downward rays reach the ground
    assert np.all(scan.grid.ring_inclinations[np.nonzero(hit)[0]] < 0)


def test_world_determinism():
    a = generate_world(5, WorldConfig(n_objects=15, aliasing=True))
    b = generate_world(5, WorldConfig(n_objects=15, aliasing=True))
    assert a.to_json() == b.to_json()
    assert World.from_json(a.to_json()).to_json() == a.to_json()


def test_aliased_world_has_shape_identical_pairs():
    w = generate_world(7, WorldConfig(n_objects=20, aliasing=True))
    objs = w.objects
    pairs = [(a.id, b.id) for i, a in enumerate(objs) for b in objs[i + 1:]
             if a.kind == b.kind and a.dims == b.dims and a.yaw == b.yaw]
    assert len(pairs) >= 2
    assert pairs == w.shape_identical_pairs()
    for a, b in pairs:
        assert w.object(a).reflectivity != w.object(b).reflectivity


@given(st.integers(0, 10_000))
@settings(max_examples=15)
def test_reflectivities_and_ids(seed):
    w = generate_world(seed, WorldConfig(n_objects=10, aliasing=seed % 2 == 0))
    ids = [o.id for o in w.objects]
    assert len(set(ids)) == len(ids) and GROUND_ID not in ids
    for o in w.objects:
        assert all(0.0 <= r <= 1.0 for r in o.reflectivity)


def test_stationary_box_ranges_and_timestamps():
    traj = stationary_trajectory(PoseSE3(np.eye(3), [0, 0, 1.8]), 0.0, 1.0)
    scan = simulate_scan(box_world(10.0), traj, 0.0, 0.1, SMALL)
    box = scan.labels == 1
    assert box.any()
    rows, cols = scan.pixel_index[box].T
    r = scan.grid.ranges[rows, cols]
    # front face at x = 10 m, so range = 10 / cos(angle off the face normal)
    d = scan.grid.directions[rows, cols]
    assert np.allclose(r * d[:, 0], 10.0, atol=1e-9)
    t = scan.grid.timestamps
    assert np.all(np.diff(t[0]) > 0)
    assert np.all(t == t[0])


def test_stationary_directions_are_nominal():
    traj = stationary_trajectory(PoseSE3(np.eye(3), [3, -2, 1.8]), 0.0, 1.0)
    scan = simulate_scan(generate_world(2, WorldConfig(n_objects=8, road_length=40)), traj, 0.2, 0.1, SMALL)
    nominal = nominal_directions(SMALL.ring_inclinations(), SMALL.width)
    assert np.array_equal(scan.grid.directions, nominal)


def test_moving_sensor_column_origins():
    traj = road_trajectory(0.0, 50.0, 10.0)
    scan = simulate_scan(generate_world(1, WorldConfig(n_objects=0)), traj, 1.0, 0.1, ScanConfig(width=1024))
    first, last = scan.column_poses[0], scan.column_poses[-1]
    W = 1024
    expected = 10.0 * 0.1 * (W - 1) / W
    assert abs(np.linalg.norm(last.translation - first.translation) - expected) < 1e-9
    # a full revolution: column W would start at t0 + period
    per_col = np.linalg.norm(scan.column_poses[1].translation - first.translation)
    assert abs(per_col * W - 1.0) < 1e-9


def test_trajectory_gap():
    traj = road_trajectory(0.0, 10.0, 10.0)
    with pytest.raises(ValueError, match="trajectory does not cover scan interval"):
        simulate_scan(box_world(), traj, 0.95, 0.1, SMALL)


def test_simulation_determinism():
    w = generate_world(3, WorldConfig(n_objects=10, road_length=60))
    traj = road_trajectory(0.0, 60.0, 12.0, weave_amplitude=1.0)
    a = simulate_scan(w, traj, 1.0, 0.1, SMALL)
    b = simulate_scan(w, traj, 1.0, 0.1, SMALL)
    for name in ("directions", "ranges", "intensities", "timestamps"):
        assert getattr(a.grid, name).tobytes() == getattr(b.grid, name).tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_labels_partition_returns():
    w = generate_world(3, WorldConfig(n_objects=10, road_length=60))
    scan = simulate_scan(w, road_trajectory(0.0, 60.0, 8.0), 1.0, 0.1, SMALL)
    ids = np.full(scan.grid.ranges.shape, -1)
    ids[scan.pixel_index[:, 0], scan.pixel_index[:, 1]] = scan.labels
    assert len(scan.labels) == np.count_nonzero(scan.grid.ranges)
    assert np.all((ids >= 0) == (scan.grid.ranges > 0))
    assert len(np.unique(scan.pixel_index, axis=0)) == len(scan.labels)


def test_intensity_model():
    traj = stationary_trajectory(PoseSE3(np.eye(3), [0, 0, 1.8]), 0.0, 1.0)
    box = Primitive(1, "box", (21.0, 0.0), 0.0, (2.0, 2.0, 3.0), (0.8,) * 5, 3, texture_amplitude=0.0)
    scan = simulate_scan(World((box,), 0), traj, 0.0, 0.1, SMALL)
    sel = scan.labels == 1
    r = scan.grid.ranges[tuple(scan.pixel_index[sel].T)]
    assert np.allclose(scan.points.intensities[sel], 0.8 * (5.0 / r) ** 2)
    assert scan.grid.intensities.min() >= 0 and scan.grid.intensities.max() <= 1


def test_point_records_roundtrip(tmp_path):
    w = generate_world(4, WorldConfig(n_objects=6, road_length=40))
    scan = simulate_scan(w, road_trajectory(0.0, 40.0, 5.0), 0.5, 0.1, SMALL)
    pts = scan.points
    sub = type(pts)(pts.positions[:3], pts.intensities[:3], pts.rings[:3], pts.timestamps[:3])
    path = tmp_path / "p.csv"
    write_point_records(path, sub)
    back = import_point_records(path)
    assert len(back) == 3
    assert np.array_equal(back.positions, sub.positions)
    assert np.array_equal(back.intensities, sub.intensities)
    assert np.array_equal(back.rings, sub.rings)
    assert np.array_equal(back.timestamps, sub.timestamps)


def test_point_records_errors(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y,z,intensity,ring,timestamp\n")
    assert len(import_point_records(p)) == 0
    p.write_text("x,y,z,intensity,ring,timestamp\n1,2,3,0.5,1,0.0\n1,2,3,0.5,-1,0.0\n")
    with pytest.raises(PointRecordError, match=":3:"):
        import_point_records(p)
    p.write_text("x,y,z,intensity,ring,timestamp\n1,nan,3,0.5,1,0.0\n")
    with pytest.raises(PointRecordError, match=":2:"):
        import_point_records(p)
    p.write_text("x,y,z,intensity,ring,timestamp\n1,2,3,0.5\n")
    with pytest.raises(PointRecordError, match=":2:"):
        import_point_records(p)
    p.write_text("1,2,3,0.5,1,0.0\n")
    with pytest.raises(PointRecordError, match="header"):
        import_point_records(p)


def test_point_records_without_timestamps(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("x,y,z,intensity,ring\n1,0,0,0.5,0\n0,1,0,0.5,0\n-1,0,0,0.5,0\n")
    pts = import_point_records(p, period=0.1)
    assert np.allclose(pts.timestamps, [0.0, 0.025, 0.05])


def test_scan_archive_roundtrip(tmp_path):
    w = generate_world(4, WorldConfig(n_objects=6, road_length=40))
    traj = road_trajectory(0.0, 40.0, 5.0)
    scans = [simulate_scan(w, traj, t, 0.1, ScanConfig(width=64, height=16)) for t in (0.5, 1.0)]
    write_scan_archive(tmp_path / "arch", scans)
    back = read_scan_archive(tmp_path / "arch")
    assert len(back) == 2
    for (pose, pts, labels), s in zip(back, scans):
        assert pose == s.grid.pose
        assert np.array_equal(pts.positions, s.points.positions)
        assert np.array_equal(labels, s.labels)
