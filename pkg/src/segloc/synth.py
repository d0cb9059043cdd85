"""Deterministic synthetic spinning-LiDAR simulator and point-record I/O.

The world is a ground plane plus upright boxes and cylinders standing along a
road that runs in +x. Reflectivity is procedural (per-face base value plus
hashed cell noise) so an object looks the same from any viewpoint.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PoseSE3, RayGrid, ScanPoints, nominal_directions, rot_z

log = logging.getLogger(__name__)

GROUND_ID = 0


# --------------------------------------------------------------------------
# world
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Primitive:
    """Upright box or cylinder resting on the ground plane.

    ``dims`` is (length, width, height) for a box and (radius, radius, height)
    for a cylinder. ``reflectivity`` holds one base value per face: boxes use
    (+x, -x, +y, -y, top), cylinders use (side, top).
    """

    id: int
    kind: str
    center: Tuple[float, float]
    yaw: float
    dims: Tuple[float, float, float]
    reflectivity: Tuple[float, ...]
    texture_seed: int
    texture_amplitude: float = 0.25
    texture_cell: float = 0.3

    def __post_init__(self):
        if self.kind not in ("box", "cylinder"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if any(not 0.0 <= r <= 1.0 for r in self.reflectivity):
            raise ValueError("reflectivity must lie in [0, 1]")
        nfaces = 5 if self.kind == "box" else 2
        if len(self.reflectivity) != nfaces:
            raise ValueError(f"{self.kind} needs {nfaces} face reflectivities")

    def same_shape(self, other: "Primitive") -> bool:
        return self.kind == other.kind and self.dims == other.dims and self.yaw == other.yaw

    @property
    def footprint_radius(self) -> float:
        if self.kind == "box":
            return 0.5 * math.hypot(self.dims[0], self.dims[1])
        return self.dims[0]


@dataclass(frozen=True)
class WorldConfig:
    n_objects: int = 20
    aliasing: bool = False
    alias_copies: int = 3
    alias_group_size: int = 5
    road_start: float = 0.0
    road_length: float = 200.0
    lateral_min: float = 6.0
    lateral_max: float = 14.0
    min_gap: float = 3.0
    zone_clearance: float = 22.0
    ground_reflectivity: float = 0.25
    ground_texture_amplitude: float = 0.15
    ground_texture_cell: float = 1.5


@dataclass(frozen=True, eq=False)
class World:
    objects: Tuple[Primitive, ...]
    seed: int
    ground_reflectivity: float = 0.25
    ground_texture_amplitude: float = 0.15
    ground_texture_cell: float = 1.5
    alias_zones: Tuple[float, ...] = ()

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids) or GROUND_ID in ids:
            raise ValueError("object ids must be unique and nonzero")

    def object(self, oid: int) -> Primitive:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def shape_identical_pairs(self) -> List[Tuple[int, int]]:
        objs = self.objects
        return [
            (a.id, b.id)
            for i, a in enumerate(objs)
            for b in objs[i + 1:]
            if a.same_shape(b)
        ]

    def to_json(self) -> str:
        d = {
            "seed": self.seed,
            "ground_reflectivity": self.ground_reflectivity,
            "ground_texture_amplitude": self.ground_texture_amplitude,
            "ground_texture_cell": self.ground_texture_cell,
            "alias_zones": list(self.alias_zones),
            "objects": [asdict(o) for o in self.objects],
        }
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "World":
        d = json.loads(text)
        objs = tuple(
            Primitive(
                id=o["id"], kind=o["kind"], center=tuple(o["center"]), yaw=o["yaw"],
                dims=tuple(o["dims"]), reflectivity=tuple(o["reflectivity"]),
                texture_seed=o["texture_seed"], texture_amplitude=o["texture_amplitude"],
                texture_cell=o["texture_cell"],
            )
            for o in d["objects"]
        )
        return cls(objs, d["seed"], d["ground_reflectivity"], d["ground_texture_amplitude"],
                   d["ground_texture_cell"], tuple(d["alias_zones"]))


def _random_shape(rng: np.random.Generator):
    if rng.random() < 0.6:
        dims = (float(rng.uniform(1.0, 3.0)), float(rng.uniform(1.0, 3.0)), float(rng.uniform(1.2, 3.5)))
        return "box", dims, float(rng.uniform(0.0, np.pi))
    r = float(rng.uniform(0.4, 1.2))
    return "cylinder", (r, r, float(rng.uniform(1.5, 4.0))), 0.0


def _random_reflectivity(rng: np.random.Generator, kind: str) -> Tuple[float, ...]:
    n = 5 if kind == "box" else 2
    return tuple(float(v) for v in rng.uniform(0.15, 0.95, size=n))


def generate_world(seed: int, config: WorldConfig = WorldConfig()) -> World:
    """Place objects along both sides of a road running in +x.

    With ``config.aliasing`` a template constellation of
    ``alias_group_size`` objects is replicated ``alias_copies`` times in
    separate zones: shapes and relative layout are identical, reflectivity is
    drawn fresh for every copy. Other objects keep ``zone_clearance`` away
    from the zone centres.
    """
    if config.n_objects < 0:
        raise ValueError("object count must be non-negative")
    rng = np.random.default_rng(seed)
    x0, length = config.road_start, config.road_length
    placed: List[Primitive] = []
    zones: List[float] = []

    def free(cx, cy, rad):
        return all(
            math.hypot(cx - o.center[0], cy - o.center[1]) >= rad + o.footprint_radius + config.min_gap
            for o in placed
        )

    def lateral():
        side = 1.0 if rng.random() < 0.5 else -1.0
        return side * float(rng.uniform(config.lateral_min, config.lateral_max))

    if config.aliasing and config.alias_copies >= 2 and config.n_objects >= 2 * config.alias_group_size:
        group = config.alias_group_size
        copies = min(config.alias_copies, config.n_objects // group)
        span = 12.0
        # template: offsets relative to a zone centre
        template = []
        for _ in range(200 * group):
            if len(template) == group:
                break
            kind, dims, yaw = _random_shape(rng)
            dx, dy = float(rng.uniform(-span, span)), lateral()
            rad = Primitive(0, kind, (0.0, 0.0), yaw, dims, (0.5,) * (5 if kind == "box" else 2), 0).footprint_radius
            ok = all(
                math.hypot(dx - tx, dy - ty) >= rad + trad + config.min_gap
                for (_, _, _, tx, ty, trad) in template
            )
            if ok:
                template.append((kind, dims, yaw, dx, dy, rad))
        spacing = length / copies
        zones = [x0 + spacing * (i + 0.5) for i in range(copies)]
        for zx in zones:
            for kind, dims, yaw, dx, dy, rad in template:
                placed.append(Primitive(
                    id=len(placed) + 1, kind=kind, center=(zx + dx, dy), yaw=yaw, dims=dims,
                    reflectivity=_random_reflectivity(rng, kind),
                    texture_seed=int(rng.integers(0, 2**31 - 1)),
                ))

    attempts = 0
    while len(placed) < config.n_objects and attempts < 10000:
        attempts += 1
        kind, dims, yaw = _random_shape(rng)
        cx, cy = float(rng.uniform(x0, x0 + length)), lateral()
        probe = Primitive(0, kind, (cx, cy), yaw, dims, (0.5,) * (5 if kind == "box" else 2), 0)
        if any(abs(cx - z) < config.zone_clearance for z in zones):
            continue
        if not free(cx, cy, probe.footprint_radius):
            continue
        placed.append(Primitive(
            id=len(placed) + 1, kind=kind, center=(cx, cy), yaw=yaw, dims=dims,
            reflectivity=_random_reflectivity(rng, kind),
            texture_seed=int(rng.integers(0, 2**31 - 1)),
        ))
    if len(placed) < config.n_objects:
        log.warning("placed only %d of %d objects", len(placed), config.n_objects)
    return World(tuple(placed), seed, config.ground_reflectivity, config.ground_texture_amplitude,
                 config.ground_texture_cell, tuple(zones))


# --------------------------------------------------------------------------
# procedural texture
# --------------------------------------------------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _hash01(*keys: np.ndarray) -> np.ndarray:
    """Deterministic uniform [0, 1) hash of integer arrays (splitmix64 mix)."""
    with np.errstate(over="ignore"):
        h = np.zeros(np.broadcast(*keys).shape, dtype=np.uint64)
        for k in keys:
            h = h ^ (np.asarray(k).astype(np.int64).astype(np.uint64) + _M1 + (h << np.uint64(6)) + (h >> np.uint64(2)))
            h = (h ^ (h >> np.uint64(30))) * _M2
            h = (h ^ (h >> np.uint64(27))) * _M3
            h = h ^ (h >> np.uint64(31))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _texture(base, amp, cell, seed, face, u, v):
    cu = np.floor(u / cell)
    cv = np.floor(v / cell)
    noise = _hash01(cu, cv, face, np.full_like(face, seed))
    return np.clip(base + amp * (2.0 * noise - 1.0), 0.0, 1.0)


# --------------------------------------------------------------------------
# ray casting
# --------------------------------------------------------------------------


def _cast_box(obj: Primitive, o, d):
    c = np.array([obj.center[0], obj.center[1], 0.5 * obj.dims[2]])
    R = rot_z(obj.yaw)
    ol = (o - c) @ R
    dl = d @ R
    half = 0.5 * np.asarray(obj.dims)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-half - ol) * inv
        t2 = (half - ol) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    tnear = tmin.max(axis=1)
    tfar = tmax.min(axis=1)
    hit = (tnear <= tfar) & (tnear > 1e-9)
    t = np.where(hit, tnear, np.inf)
    axis = tmin.argmax(axis=1)
    sign = np.take_along_axis(dl, axis[:, None], axis=1)[:, 0] < 0  # hit the + face
    # faces: 0 +x, 1 -x, 2 +y, 3 -y, 4 top (bottom never visible)
    face = np.where(axis == 2, 4, 2 * axis + np.where(sign, 0, 1))
    tt = np.where(hit, t, 0.0)
    pl = ol + tt[:, None] * dl
    u = np.where(axis == 0, pl[:, 1], pl[:, 0])
    v = np.where(axis == 2, pl[:, 1], pl[:, 2])
    base = np.asarray(obj.reflectivity)[face]
    refl = _texture(base, obj.texture_amplitude, obj.texture_cell, obj.texture_seed, face, u, v)
    return t, refl


def _cast_cylinder(obj: Primitive, o, d):
    r, h = obj.dims[0], obj.dims[2]
    cx, cy = obj.center
    ox, oy = o[:, 0] - cx, o[:, 1] - cy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (ox * d[:, 0] + oy * d[:, 1])
    cc = ox ** 2 + oy ** 2 - r * r
    disc = b * b - 4.0 * a * cc
    with np.errstate(divide="ignore", invalid="ignore"):
        ts = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
    zs = o[:, 2] + ts * d[:, 2]
    side = (disc >= 0) & (a > 0) & (ts > 1e-9) & (zs >= 0.0) & (zs <= h)
    t_side = np.where(side, ts, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        tc = (h - o[:, 2]) / d[:, 2]
    px = ox + tc * d[:, 0]
    py = oy + tc * d[:, 1]
    cap = (tc > 1e-9) & (px ** 2 + py ** 2 <= r * r) & np.isfinite(tc)
    t_cap = np.where(cap, tc, np.inf)
    use_cap = t_cap < t_side
    t = np.minimum(t_side, t_cap)
    tt = np.where(np.isfinite(t), t, 0.0)
    p = np.stack([ox + tt * d[:, 0], oy + tt * d[:, 1], o[:, 2] + tt * d[:, 2]], axis=1)
    face = use_cap.astype(np.int64)
    u = np.where(use_cap, p[:, 0], np.arctan2(p[:, 1], p[:, 0]) * r)
    v = np.where(use_cap, p[:, 1], p[:, 2])
    base = np.asarray(obj.reflectivity)[face]
    refl = _texture(base, obj.texture_amplitude, obj.texture_cell, obj.texture_seed, face, u, v)
    return t, refl


def cast_rays(world: World, origins: np.ndarray, dirs: np.ndarray, max_range: float):
    """Closest hit per ray. Returns (distance or inf, object id, reflectivity)."""
    n = len(origins)
    best = np.full(n, np.inf)
    ids = np.full(n, -1, dtype=np.int64)
    refl = np.zeros(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -origins[:, 2] / dirs[:, 2]
    ground = (dirs[:, 2] < 0) & (tg > 0)
    tg = np.where(ground, tg, np.inf)
    gp = origins + np.where(ground, tg, 0.0)[:, None] * dirs
    zero = np.zeros(n, dtype=np.int64)
    gref = _texture(world.ground_reflectivity, world.ground_texture_amplitude, world.ground_texture_cell,
                    world.seed, zero, gp[:, 0], gp[:, 1])
    take = tg < best
    best = np.where(take, tg, best)
    ids = np.where(take, GROUND_ID, ids)
    refl = np.where(take, gref, refl)
    centre = origins.mean(axis=0)
    for obj in world.objects:
        if math.hypot(obj.center[0] - centre[0], obj.center[1] - centre[1]) > max_range + obj.footprint_radius + 2.0:
            continue
        if obj.kind == "box":
            t, r = _cast_box(obj, origins, dirs)
        else:
            t, r = _cast_cylinder(obj, origins, dirs)
        take = t < best
        best = np.where(take, t, best)
        ids = np.where(take, obj.id, ids)
        refl = np.where(take, r, refl)
    return best, ids, refl


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


class Trajectory:
    """Piecewise-linear translation with spherical-linear rotation."""

    def __init__(self, waypoints: Sequence[PoseSE3]):
        if len(waypoints) < 1:
            raise ValueError("trajectory needs at least one waypoint")
        ts = np.array([w.timestamp for w in waypoints])
        if np.any(np.diff(ts) <= 0):
            raise ValueError("waypoint timestamps must be strictly increasing")
        self.waypoints = tuple(waypoints)
        self.times = ts

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def covers(self, t0: float, t1: float) -> bool:
        return self.start <= t0 and t1 <= self.end

    def at(self, t: float) -> PoseSE3:
        if not self.start <= t <= self.end:
            raise ValueError("trajectory does not cover scan interval")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        i = min(i, len(self.times) - 2) if len(self.times) > 1 else 0
        a = self.waypoints[i]
        if len(self.waypoints) == 1 or t == a.timestamp:
            return PoseSE3(a.rotation, a.translation, t)
        b = self.waypoints[i + 1]
        s = (t - a.timestamp) / (b.timestamp - a.timestamp)
        trans = a.translation + s * (b.translation - a.translation)
        if np.array_equal(a.rotation, b.rotation):
            rot = a.rotation
        else:
            rel = Rotation.from_matrix(a.rotation.T @ b.rotation).as_rotvec()
            rot = a.rotation @ Rotation.from_rotvec(s * rel).as_matrix()
        return PoseSE3(rot, trans, t)


def stationary_trajectory(pose: PoseSE3, t_start: float, t_end: float) -> Trajectory:
    return Trajectory([
        PoseSE3(pose.rotation, pose.translation, t_start),
        PoseSE3(pose.rotation, pose.translation, t_end),
    ])


def road_trajectory(x_start: float, distance: float, speed: float, lateral_offset: float = 0.0,
                    height: float = 1.8, weave_amplitude: float = 0.0, weave_wavelength: float = 40.0,
                    t_start: float = 0.0, duration: Optional[float] = None, dt: float = 0.02) -> Trajectory:
    """Drive along +x at constant speed, optionally weaving sideways.

    Heading follows the path tangent, so weaving also yaws the sensor.
    ``speed == 0`` gives a stationary sensor held for ``duration`` seconds.
    """
    if speed == 0.0:
        pose = PoseSE3(np.eye(3), np.array([x_start, lateral_offset, height]))
        return stationary_trajectory(pose, t_start, t_start + (duration if duration is not None else 1.0))
    total = distance / speed if duration is None else duration
    n = max(2, int(math.ceil(total / dt)) + 1)
    k = 2.0 * np.pi / weave_wavelength
    wps = []
    for i in range(n):
        t = total * i / (n - 1)
        x = x_start + speed * t
        y = lateral_offset + weave_amplitude * math.sin(k * (x - x_start))
        slope = weave_amplitude * k * math.cos(k * (x - x_start))
        wps.append(PoseSE3(rot_z(math.atan(slope)), np.array([x, y, height]), t_start + t))
    return Trajectory(wps)


# --------------------------------------------------------------------------
# scanning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanConfig:
    height: int = 64
    width: int = 1024
    fov_up_deg: float = 16.6
    fov_down_deg: float = -16.6
    min_range: float = 3.0
    max_range: float = 60.0
    reference_range: float = 5.0
    range_noise: float = 0.0
    reference_fraction: float = 0.5
    noise_seed: int = 0

    def ring_inclinations(self) -> np.ndarray:
        return np.deg2rad(np.linspace(self.fov_up_deg, self.fov_down_deg, self.height))


@dataclass(frozen=True, eq=False)
class Scan:
    grid: RayGrid
    points: ScanPoints
    labels: np.ndarray
    pixel_index: np.ndarray  # (N, 2) row/column of each returned point
    column_poses: Tuple[PoseSE3, ...] = field(repr=False, default=())


def simulate_scan(world: World, trajectory: Trajectory, t0: float, period: float,
                  config: ScanConfig = ScanConfig()) -> Scan:
    """Ray-cast one revolution with a column-synchronous rolling shutter.

    Column ``j`` fires at ``t0 + period * j / W`` from the interpolated sensor
    pose. The grid stores motion-compensated directions and ranges in the
    frame of the sensor at ``t0 + reference_fraction * period``.
    """
    if not trajectory.covers(t0, t0 + period):
        raise ValueError("trajectory does not cover scan interval")
    H, W = config.height, config.width
    inc = config.ring_inclinations()
    dnom = nominal_directions(inc, W)
    col_t = t0 + period * np.arange(W) / W
    poses = tuple(trajectory.at(float(t)) for t in col_t)
    Rs = np.stack([p.rotation for p in poses])
    ts = np.stack([p.translation for p in poses])
    dirs_w = np.einsum("jab,ijb->ija", Rs, dnom)
    origins = np.broadcast_to(ts[None, :, :], (H, W, 3))
    dist, ids, refl = cast_rays(world, origins.reshape(-1, 3), dirs_w.reshape(-1, 3), config.max_range)
    dist = dist.reshape(H, W)
    ids = ids.reshape(H, W)
    refl = refl.reshape(H, W)
    if config.range_noise > 0:
        rng = np.random.default_rng([config.noise_seed, int(round(t0 * 1e6)) & 0x7FFFFFFF])
        dist = dist + rng.normal(0.0, config.range_noise, size=dist.shape)
    ret = np.isfinite(dist) & (dist >= config.min_range) & (dist <= config.max_range)
    rng_raw = np.where(ret, dist, 0.0)
    inten = np.where(ret, np.clip(refl * np.minimum(1.0, (config.reference_range / np.where(ret, rng_raw, 1.0)) ** 2), 0.0, 1.0), 0.0)

    ref = trajectory.at(t0 + config.reference_fraction * period)
    Rr, tr = ref.rotation, ref.translation
    p_world = origins + dirs_w * rng_raw[..., None]
    p_common = (p_world - tr) @ Rr
    d_common = dirs_w @ Rr
    rng_c = np.linalg.norm(p_common, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        n_ret = p_common / rng_c[..., None]
    directions = np.where(ret[..., None], n_ret, d_common)
    directions = directions / np.linalg.norm(directions, axis=-1, keepdims=True)
    ranges = np.where(ret, rng_c, 0.0)
    same = np.array([np.array_equal(p.rotation, Rr) and np.array_equal(p.translation, tr) for p in poses])
    if same.any():
        directions[:, same] = dnom[:, same]
        ranges[:, same] = rng_raw[:, same]
    grid = RayGrid(directions, ranges, inten, np.broadcast_to(col_t, (H, W)), inc,
                   PoseSE3(Rr, tr, ref.timestamp))

    rows, cols = np.nonzero(ret)
    pts = dnom[rows, cols] * rng_raw[rows, cols, None]
    points = ScanPoints(pts, inten[rows, cols], rows, col_t[cols] - t0, height=H)
    return Scan(grid, points, ids[rows, cols], np.stack([rows, cols], axis=1), poses)


# --------------------------------------------------------------------------
# point records and scan archives
# --------------------------------------------------------------------------

RECORD_HEADER = ["x", "y", "z", "intensity", "ring", "timestamp"]


class PointRecordError(ValueError):
    pass


def import_point_records(path, period: float = 0.1, height: Optional[int] = None) -> ScanPoints:
    """Read the ``x,y,z,intensity,ring[,timestamp]`` CSV schema.

    Without a timestamp column, times are spread uniformly over ``period``
    by azimuth, as for a column-synchronous sensor.
    """
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:5]] != RECORD_HEADER[:5]:
            raise PointRecordError(f"{path}: missing or malformed header, expected {','.join(RECORD_HEADER)}")
        header = [h.strip() for h in header]
        has_t = header == RECORD_HEADER
        if not has_t and header != RECORD_HEADER[:5]:
            raise PointRecordError(f"{path}: unexpected columns {header}")
        ncol = len(header)
        pos, inten, rings, times = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != ncol:
                raise PointRecordError(f"{path}:{lineno}: expected {ncol} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row[:4]]
                ring = int(row[4])
                t = float(row[5]) if has_t else None
            except ValueError as e:
                raise PointRecordError(f"{path}:{lineno}: {e}") from None
            if any(math.isnan(v) for v in vals) or (t is not None and math.isnan(t)):
                raise PointRecordError(f"{path}:{lineno}: NaN value")
            if ring < 0 or (height is not None and ring >= height):
                raise PointRecordError(f"{path}:{lineno}: ring {ring} out of range")
            if vals[3] < 0:
                raise PointRecordError(f"{path}:{lineno}: negative intensity")
            pos.append(vals[:3])
            inten.append(vals[3])
            rings.append(ring)
            times.append(t)
    pos_a = np.array(pos, dtype=np.float64).reshape(-1, 3)
    if not has_t:
        beta = np.mod(np.arctan2(pos_a[:, 1], pos_a[:, 0]), 2 * np.pi)
        times = period * beta / (2 * np.pi)
    return ScanPoints(pos_a, inten, rings, times, height=height)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_point_records(path, points: ScanPoints) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for p, i, r, t in zip(points.positions, points.intensities, points.rings, points.timestamps):
            w.writerow([_fmt(p[0]), _fmt(p[1]), _fmt(p[2]), _fmt(i), int(r), _fmt(t)])


POSE_HEADER = ["timestamp"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"]


def write_scan_archive(directory, scans: Sequence[Scan]) -> None:
    """Per revolution: ``scan_%06d.csv``, ``labels_%06d.csv``; one ``poses.csv``."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "poses.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(POSE_HEADER)
        for s in scans:
            p = s.grid.pose
            w.writerow([_fmt(p.timestamp)] + [_fmt(v) for v in p.rotation.ravel()] + [_fmt(v) for v in p.translation])
    for k, s in enumerate(scans):
        write_point_records(os.path.join(directory, f"scan_{k:06d}.csv"), s.points)
        with open(os.path.join(directory, f"labels_{k:06d}.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["point_index", "object_id"])
            for i, oid in enumerate(s.labels):
                w.writerow([i, int(oid)])


def read_scan_archive(directory) -> List[Tuple[PoseSE3, ScanPoints, np.ndarray]]:
    poses = []
    with open(os.path.join(directory, "poses.csv"), newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        if next(reader, None) != POSE_HEADER:
            raise PointRecordError("poses.csv: malformed header")
        for row in reader:
            v = [float(c) for c in row]
            poses.append(PoseSE3(np.array(v[1:10]).reshape(3, 3), np.array(v[10:13]), v[0]))
    out = []
    for k, pose in enumerate(poses):
        pts = import_point_records(os.path.join(directory, f"scan_{k:06d}.csv"))
        labels = np.zeros(len(pts), dtype=np.int64)
        with open(os.path.join(directory, f"labels_{k:06d}.csv"), newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            next(reader)
            for row in reader:
                labels[int(row[0])] = int(row[1])
        out.append((pose, pts, labels))
    return out
