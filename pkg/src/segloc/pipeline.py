"""End-to-end experiment plumbing on the simulator.

A run synthesizes one world and three drives through it: a training drive,
a database drive (the first lap) and a query drive (the second lap, seen
through an odometry frame offset from the world). Each drive is segmented
incrementally; every time a segment grows, the observation, its point set
and its aligned mask in that scan are recorded.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import PoseSE3, RayGrid, VisualView, compose, rot_z
from .imaging import AlignedProjector, ProjectionMargins, compute_mask
from .localization import LoopClosure, SegmentDB, closure_error, localize
from .nn.model import NetParams, describe
from .nn.train import MIN_MASK_AREA, normalize_inputs
from .segmentation import IncrementalSegmenter, SegmenterConfig, voxelize
from .synth import ScanConfig, World, WorldConfig, generate_world, road_trajectory, simulate_scan

log = logging.getLogger(__name__)

SEQ_TRAIN, SEQ_DB, SEQ_QUERY = 0, 1, 2


@dataclass(frozen=True)
class DriveConfig:
    speed: float
    lateral_offset: float = 0.0
    weave_amplitude: float = 0.0
    odom_yaw: float = 0.0
    odom_shift: Tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    n_objects: int = 45
    aliasing: bool = True
    alias_copies: int = 3
    alias_group_size: int = 5
    road_length: float = 360.0
    lead: float = 30.0
    height: int = 64
    width: int = 256
    period: float = 0.1
    scan_interval: float = 0.2
    range_noise: float = 0.01
    radius: float = 0.5
    min_points: int = 30
    ground_z: float = 0.3
    active_range: float = 70.0
    train_drive: DriveConfig = DriveConfig(8.0, -1.5, 0.6)
    db_drive: DriveConfig = DriveConfig(10.0, 0.0)
    query_drive: DriveConfig = DriveConfig(7.0, 1.5, 0.0, 0.0, (-35.0, 20.0))
    max_scans: Optional[int] = None

    def world_config(self) -> WorldConfig:
        return WorldConfig(n_objects=self.n_objects, aliasing=self.aliasing, alias_copies=self.alias_copies,
                           alias_group_size=self.alias_group_size, road_length=self.road_length)

    def scan_config(self, drive: int) -> ScanConfig:
        return ScanConfig(height=self.height, width=self.width, range_noise=self.range_noise,
                          noise_seed=self.seed * 10 + drive)

    def segmenter_config(self) -> SegmenterConfig:
        return SegmenterConfig(radius=self.radius, min_points=self.min_points, ground_z=self.ground_z,
                               active_range=self.active_range)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        for k in ("train_drive", "db_drive", "query_drive"):
            if isinstance(d.get(k), dict):
                v = dict(d[k])
                v["odom_shift"] = tuple(v.get("odom_shift", (0.0, 0.0)))
                d[k] = DriveConfig(**v)
        return cls(**d)


@dataclass
class Drive:
    """Everything recorded along one drive; arrays are in the drive's map frame."""

    sequence: int
    odom: PoseSE3
    points: np.ndarray
    point_labels: np.ndarray
    scan_times: np.ndarray
    sensor_positions: np.ndarray
    grid_poses: np.ndarray
    intensity: np.ndarray
    ranges: np.ndarray
    obs_sid: np.ndarray
    obs_track: np.ndarray
    obs_scan: np.ndarray
    obs_count: np.ndarray
    obs_area: np.ndarray
    obs_pts: List[np.ndarray]
    obs_mask: List[np.ndarray]
    track_ids: np.ndarray
    track_labels: np.ndarray
    track_counts: np.ndarray

    @property
    def n_obs(self) -> int:
        return len(self.obs_sid)

    def obs_time(self, i) -> float:
        return float(self.scan_times[self.obs_scan[i]])

    def view(self, i) -> VisualView:
        s = self.obs_scan[i]
        m = np.zeros(self.intensity.shape[1:], dtype=np.uint8)
        m.reshape(-1)[self.obs_mask[i]] = 1
        return VisualView(self.intensity[s], self.ranges[s], m, float(self.scan_times[s]))

    def obs_points(self, i) -> np.ndarray:
        return self.points[self.obs_pts[i]]

    def track_count(self, track: int) -> int:
        return int(self.track_counts[np.searchsorted(self.track_ids, track)])

    def track_label(self, track: int) -> int:
        return int(self.track_labels[np.searchsorted(self.track_ids, track)])

    def completeness(self, i) -> float:
        return float(self.obs_count[i]) / self.track_count(int(self.obs_track[i]))

    def test_view_obs(self, i) -> Optional[int]:
        """Observation whose mask is the largest of the track so far (earliest on ties)."""
        t = self.obs_track[i]
        cand = np.nonzero((self.obs_track == t) & (np.arange(self.n_obs) <= i))[0]
        best = cand[np.argmax(self.obs_area[cand])]
        return int(best) if self.obs_area[best] >= MIN_MASK_AREA else None


def _grid_in_map(grid: RayGrid, odom: PoseSE3) -> RayGrid:
    return replace(grid, pose=compose(odom, grid.pose))


def run_drive(world: World, cfg: ExperimentConfig, drive_cfg: DriveConfig, sequence: int) -> Drive:
    x0 = -cfg.lead
    dist = cfg.road_length + 2 * cfg.lead
    traj = road_trajectory(x0, dist, drive_cfg.speed, drive_cfg.lateral_offset, weave_amplitude=drive_cfg.weave_amplitude)
    odom = PoseSE3(rot_z(drive_cfg.odom_yaw), np.array([drive_cfg.odom_shift[0], drive_cfg.odom_shift[1], 0.0]))
    scfg = cfg.scan_config(sequence)
    seg = IncrementalSegmenter(cfg.segmenter_config())
    times = np.arange(traj.start, traj.end - cfg.period, cfg.scan_interval)
    if cfg.max_scans is not None:
        times = times[:cfg.max_scans]
    margins = ProjectionMargins()
    S = len(times)
    inten = np.zeros((S, cfg.height, cfg.width), dtype=np.float32)
    rngs = np.zeros((S, cfg.height, cfg.width), dtype=np.float32)
    sensor = np.zeros((S, 3))
    gposes = np.zeros((S, 4, 4))
    obs = []
    for s, t0 in enumerate(times):
        scan = simulate_scan(world, traj, float(t0), cfg.period, scfg)
        grid = _grid_in_map(scan.grid, odom)
        inten[s] = grid.intensities
        rngs[s] = grid.ranges
        sensor[s] = grid.pose.translation
        gposes[s] = grid.pose.matrix()
        ret = grid.ranges > 0
        pts = grid.pose.apply(grid.points()[ret])
        labels = np.zeros(grid.ranges.shape, dtype=np.int64)
        labels[scan.pixel_index[:, 0], scan.pixel_index[:, 1]] = scan.labels
        updated = seg.update(pts, float(grid.timestamp), labels[ret], center=grid.pose.translation)
        if not updated:
            continue
        proj = AlignedProjector(grid, margins)
        for sid in updated:
            idx = seg.segment_indices(sid)
            mask = compute_mask(seg.points[idx], grid, margins, projector=proj)
            obs.append((sid, s, len(idx), int(mask.sum()), idx.astype(np.int32),
                        np.flatnonzero(mask).astype(np.int32)))
    tracks = np.array(seg.segment_ids(), dtype=np.int64)
    t_labels, t_counts = [], []
    for sid in tracks:
        idx = seg.segment_indices(int(sid))
        t_labels.append(seg.majority_label(idx))
        t_counts.append(len(idx))
    obs_sid = np.array([o[0] for o in obs], dtype=np.int64)
    obs_track = np.array([seg.resolve(int(o[0])) for o in obs], dtype=np.int64)
    log.info("drive %d: %d scans, %d tracks, %d observations", sequence, S, len(tracks), len(obs))
    return Drive(
        sequence, odom, seg.points.copy(), seg.point_labels.copy(), times + cfg.period * 0.5, sensor, gposes, inten, rngs,
        obs_sid, obs_track,
        np.array([o[1] for o in obs], dtype=np.int64), np.array([o[2] for o in obs], dtype=np.int64),
        np.array([o[3] for o in obs], dtype=np.int64), [o[4] for o in obs], [o[5] for o in obs],
        tracks, np.array(t_labels, dtype=np.int64), np.array(t_counts, dtype=np.int64),
    )


@dataclass
class Experiment:
    config: ExperimentConfig
    world: World
    drives: Dict[int, Drive] = field(default_factory=dict)


def synthesize(cfg: ExperimentConfig, sequences: Sequence[int] = (SEQ_TRAIN, SEQ_DB, SEQ_QUERY)) -> Experiment:
    world = generate_world(cfg.seed, cfg.world_config())
    exp = Experiment(cfg, world)
    dcfg = {SEQ_TRAIN: cfg.train_drive, SEQ_DB: cfg.db_drive, SEQ_QUERY: cfg.query_drive}
    for s in sequences:
        exp.drives[s] = run_drive(world, cfg, dcfg[s], s)
    return exp


# --------------------------------------------------------------------------
# storage: one directory per drive of .npy files (deterministic bytes)
# --------------------------------------------------------------------------

_ARRAYS = ["points", "point_labels", "scan_times", "sensor_positions", "grid_poses", "intensity", "ranges",
           "obs_sid", "obs_track", "obs_scan", "obs_count", "obs_area", "track_ids", "track_labels", "track_counts"]


def _save_ragged(path, parts):
    lens = np.array([len(p) for p in parts], dtype=np.int64)
    np.save(path + "_len.npy", lens)
    np.save(path + ".npy", np.concatenate(parts).astype(np.int32) if parts else np.zeros(0, np.int32))


def _load_ragged(path):
    lens = np.load(path + "_len.npy")
    flat = np.load(path + ".npy")
    return np.split(flat, np.cumsum(lens)[:-1]) if len(lens) else []


def save_experiment(directory, exp: Experiment) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "world.json"), "w", encoding="utf-8") as f:
        f.write(exp.world.to_json() + "\n")
    with open(os.path.join(directory, "experiment.json"), "w", encoding="utf-8") as f:
        json.dump(exp.config.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    for s, d in sorted(exp.drives.items()):
        sub = os.path.join(directory, f"drive_{s}")
        os.makedirs(sub, exist_ok=True)
        for name in _ARRAYS:
            np.save(os.path.join(sub, name + ".npy"), getattr(d, name))
        np.save(os.path.join(sub, "odom.npy"), d.odom.matrix())
        _save_ragged(os.path.join(sub, "obs_pts"), d.obs_pts)
        _save_ragged(os.path.join(sub, "obs_mask"), d.obs_mask)


def load_experiment(directory) -> Experiment:
    path = os.path.join(directory, "experiment.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{directory}: no experiment.json")
    with open(path, encoding="utf-8") as f:
        cfg = ExperimentConfig.from_dict(json.load(f))
    with open(os.path.join(directory, "world.json"), encoding="utf-8") as f:
        world = World.from_json(f.read())
    exp = Experiment(cfg, world)
    for s in (SEQ_TRAIN, SEQ_DB, SEQ_QUERY):
        sub = os.path.join(directory, f"drive_{s}")
        if not os.path.isdir(sub):
            continue
        arrs = {name: np.load(os.path.join(sub, name + ".npy")) for name in _ARRAYS}
        exp.drives[s] = Drive(sequence=s, odom=PoseSE3.from_matrix(np.load(os.path.join(sub, "odom.npy"))),
                              obs_pts=_load_ragged(os.path.join(sub, "obs_pts")),
                              obs_mask=_load_ragged(os.path.join(sub, "obs_mask")), **arrs)
    return exp


# --------------------------------------------------------------------------
# network inputs
# --------------------------------------------------------------------------


def voxel_input(points: np.ndarray) -> np.ndarray:
    return voxelize(points).occupancy.astype(np.float32)


def training_set(drive: Drive, min_views: int = 8, max_views: int = 16, min_classes: int = 2):
    """(voxels, views, labels, track ids) with one class per track.

    A track qualifies with at least ``min_views`` observations whose own mask
    passes the area rule; at most ``max_views`` evenly spaced ones are kept.
    """
    ok = drive.obs_area >= MIN_MASK_AREA
    vox, views, labels, classes = [], [], [], []
    for track in drive.track_ids:
        idx = np.nonzero(ok & (drive.obs_track == track))[0]
        if len(idx) < min_views:
            continue
        if len(idx) > max_views:
            idx = idx[np.round(np.linspace(0, len(idx) - 1, max_views)).astype(int)]
        c = len(classes)
        classes.append(int(track))
        for i in idx:
            vox.append(voxel_input(drive.obs_points(i)))
            views.append(drive.view(i))
            labels.append(c)
    if len(classes) < min_classes:
        raise ValueError(f"only {len(classes)} trainable tracks")
    return np.stack(vox), views, np.array(labels, dtype=np.int64), classes


def tensors(views: Sequence[VisualView], stats) -> np.ndarray:
    return np.stack([normalize_inputs(v, stats) for v in views]).astype(np.float32)


def query_inputs(drive: Drive, obs: Sequence[int], stats):
    """Test-time inputs: current points, largest view so far. Skips obs without a valid view."""
    keep, vox, vis = [], [], []
    for i in obs:
        j = drive.test_view_obs(i)
        if j is None:
            continue
        keep.append(int(i))
        vox.append(voxel_input(drive.obs_points(i)))
        vis.append(normalize_inputs(drive.view(j), stats))
    if not keep:
        return keep, np.zeros((0, 32, 32, 16), np.float32), np.zeros((0, 3, 1, 1), np.float32)
    return keep, np.stack(vox), np.stack(vis).astype(np.float32)


def describe_observations(params: NetParams, drive: Drive, obs: Optional[Sequence[int]] = None):
    obs = range(drive.n_obs) if obs is None else obs
    keep, vox, vis = query_inputs(drive, obs, params.intensity_stats)
    if not keep:
        return keep, np.zeros((0, params.config.descriptor_dim))
    return keep, describe(params, vox, vis)


def observation_db(params: NetParams, drive: Drive, obs: Optional[Sequence[int]] = None):
    keep, D = describe_observations(params, drive, obs)
    db = SegmentDB(params.config.descriptor_dim)
    for i, d in zip(keep, D):
        # keyed by the segment id at observation time: merged segments share a track
        db.add(int(drive.obs_sid[i]), d, drive.obs_points(i).mean(axis=0), drive.sequence,
               drive.obs_time(i), drive.track_label(int(drive.obs_track[i])))
    return db, keep, D


def final_db(params: NetParams, drive: Drive) -> SegmentDB:
    """One entry per track: final points with the largest view of the whole drive."""
    last = []
    for track in drive.track_ids:
        idx = np.nonzero(drive.obs_track == track)[0]
        if len(idx):
            last.append(int(idx[-1]))
    keep, D = describe_observations(params, drive, last)
    db = SegmentDB(params.config.descriptor_dim)
    for i, d in zip(keep, D):
        track = int(drive.obs_track[i])
        db.add(track, d, drive.obs_points(i).mean(axis=0), drive.sequence, drive.obs_time(i),
               drive.track_label(track))
    return db


def local_map(drive: Drive, scan: int, radius: float = 30.0) -> List[int]:
    """Latest observation index of every track seen up to ``scan`` whose centroid is near the sensor."""
    sel = np.nonzero(drive.obs_scan <= scan)[0]
    latest: Dict[int, int] = {}
    for i in sel:
        latest[int(drive.obs_track[i])] = int(i)
    pos = drive.sensor_positions[scan]
    out = []
    for track, i in sorted(latest.items()):
        c = drive.obs_points(i).mean(axis=0)
        if np.linalg.norm(c[:2] - pos[:2]) <= radius:
            out.append(i)
    return out


def run_localization(params: NetParams, query: Drive, db: SegmentDB, policy: str, every: int = 3,
                     radius: float = 30.0, min_local: int = 4, k: int = 25) -> List[LoopClosure]:
    """Try a closure every ``every`` scans of the query drive; errors vs ground truth filled in."""
    true_pose = query.odom.inverse()
    closures = []
    n_scans = len(query.scan_times)
    for s in range(0, n_scans, every):
        obs = local_map(query, s, radius)
        if len(obs) < min_local:
            continue
        keep, D = describe_observations(params, query, obs)
        if len(keep) < min_local:
            continue
        cents = np.stack([query.obs_points(i).mean(axis=0) for i in keep])
        tracks = [int(query.obs_track[i]) for i in keep]
        c = localize(D, cents, db, policy, k=k, query_ids=tracks, timestamp=float(query.scan_times[s]))
        if c is None:
            continue
        c.error = closure_error(c.pose, true_pose, query.sensor_positions[s])
        closures.append(c)
    return closures


# --------------------------------------------------------------------------
# evaluation runs shared by the CLI, scripts and tests
# --------------------------------------------------------------------------


@dataclass
class RankRun:
    obs: List[int]
    ranks: np.ndarray
    completeness: np.ndarray
    descriptors: np.ndarray


def rank_run(params: NetParams, exp: Experiment, db: Optional[SegmentDB] = None) -> RankRun:
    """Rank of every valid query-drive observation against all database-drive observations."""
    from .evaluation import rank_of

    if db is None:
        db, _, _ = observation_db(params, exp.drives[SEQ_DB])
    q = exp.drives[SEQ_QUERY]
    keep, D = describe_observations(params, q)
    ranks = np.array([rank_of(db, d, q.track_label(int(q.obs_track[i])), SEQ_QUERY) for i, d in zip(keep, D)])
    comp = np.array([q.completeness(i) for i in keep])
    return RankRun(keep, ranks, comp, D)


def closure_run(params: NetParams, exp: Experiment, policy: str, every: int = 3, radius: float = 30.0,
                k: int = 25, db: Optional[SegmentDB] = None) -> List[LoopClosure]:
    if db is None:
        db = final_db(params, exp.drives[SEQ_DB])
    return run_localization(params, exp.drives[SEQ_QUERY], db, policy, every=every, radius=radius, k=k)


@dataclass
class AttentionItem:
    obs: int
    heatmap: object
    weights: np.ndarray
    score: float
    rank: float
    mask: np.ndarray
    intensity: np.ndarray


def attention_run(params: NetParams, exp: Experiment, ranks: RankRun, n: int = 40,
                  dilation: int = 5) -> List[AttentionItem]:
    """Descriptor-weighted ScoreCam on ``n`` query observations spread evenly over the drive."""
    from .attention import (activations, attention_score, channel_mask, descriptor_weights,
                            scorecam_heatmap)

    q = exp.drives[SEQ_QUERY]
    pick = np.unique(np.round(np.linspace(0, len(ranks.obs) - 1, min(n, len(ranks.obs)))).astype(int))
    items = []
    for p in pick:
        i = ranks.obs[p]
        j = q.test_view_obs(i)
        view = q.view(j)
        X = normalize_inputs(view, params.intensity_stats)
        vox = voxel_input(q.obs_points(i))
        A = activations(params, X, vox)
        masks = [channel_mask(a, X.shape[1:]) for a in A]
        w = descriptor_weights(X, vox, masks, params)
        hm = scorecam_heatmap(w, A, X.shape[1:])
        try:
            s = attention_score(hm, view.mask, dilation)
        except ValueError:
            continue
        items.append(AttentionItem(i, hm, w, s, float(ranks.ranks[p]), view.mask, view.intensity))
    return items
