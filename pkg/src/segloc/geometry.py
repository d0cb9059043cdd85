"""Shared domain types: rigid poses, scan points, ray grids, segments, views."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

DESCRIPTOR_DIM = 64
ORTHO_TOL = 1e-9


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (SVD projection onto SO(3))."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def _drift(R: np.ndarray) -> float:
    return max(float(np.abs(R.T @ R - np.eye(3)).max()), abs(float(np.linalg.det(R)) - 1.0))


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if _drift(R) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3), timestamp)

    @classmethod
    def from_matrix(cls, T: np.ndarray, timestamp: float = 0.0) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3], timestamp)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation, self.timestamp)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) or (3,) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PoseSE3):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.timestamp == other.timestamp
        )

    __hash__ = None


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """``a ∘ b``: apply ``b`` first, then ``a``. Keeps ``b``'s timestamp."""
    R = a.rotation @ b.rotation
    if _drift(R) > ORTHO_TOL:
        R = orthonormalize(R)
    t = a.rotation @ b.translation + a.translation
    return PoseSE3(R, t, b.timestamp)


@dataclass(frozen=True)
class ScanPoint:
    position: tuple
    intensity: float
    ring: int
    timestamp: float


class ScanPoints(Sequence):
    """Columnar storage for a list of :class:`ScanPoint`.

    Positions are in the sensor frame at emission time.
    """

    def __init__(self, positions, intensities, rings, timestamps, height: Optional[int] = None):
        self.positions = _frozen(np.asarray(positions, dtype=np.float64).reshape(-1, 3))
        self.intensities = _frozen(intensities)
        self.rings = _frozen(rings, dtype=np.int64)
        self.timestamps = _frozen(timestamps)
        n = len(self.positions)
        if not (len(self.intensities) == len(self.rings) == len(self.timestamps) == n):
            raise ValueError("column lengths differ")
        if np.any(self.intensities < 0):
            raise ValueError("intensity must be non-negative")
        if np.any(self.rings < 0) or (height is not None and np.any(self.rings >= height)):
            raise ValueError("ring index out of range")

    @classmethod
    def empty(cls) -> "ScanPoints":
        return cls(np.zeros((0, 3)), [], [], [])

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return ScanPoints(self.positions[i], self.intensities[i], self.rings[i], self.timestamps[i])
        return ScanPoint(tuple(self.positions[i].tolist()), float(self.intensities[i]),
                         int(self.rings[i]), float(self.timestamps[i]))

    def __iter__(self) -> Iterator[ScanPoint]:
        for i in range(len(self)):
            yield self[i]


def nominal_directions(ring_inclinations: np.ndarray, width: int) -> np.ndarray:
    """Unit ray directions for every (ring, column) of an ideal spinning sensor.

    Column ``c`` looks at azimuth ``2*pi*c/width`` (counterclockwise from +x).
    """
    alpha = np.asarray(ring_inclinations, dtype=np.float64)[:, None]
    beta = 2.0 * np.pi * np.arange(width) / width
    ca = np.cos(alpha)
    return np.stack(
        [ca * np.cos(beta)[None, :], ca * np.sin(beta)[None, :], np.broadcast_to(np.sin(alpha), (len(alpha), width))],
        axis=-1,
    )


@dataclass(frozen=True, eq=False)
class RayGrid:
    """One revolution of a spinning multi-beam sensor on an H x W pixel grid.

    ``directions`` and ``ranges`` are motion compensated: ``ranges * directions``
    is the return expressed in the common frame, whose world pose is ``pose``.
    """

    directions: np.ndarray
    ranges: np.ndarray
    intensities: np.ndarray
    timestamps: np.ndarray
    ring_inclinations: np.ndarray
    pose: PoseSE3 = field(default_factory=PoseSE3.identity)

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ValueError("directions must be H x W x 3")
        H, W = d.shape[:2]
        for name in ("ranges", "intensities", "timestamps"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != (H, W):
                raise ValueError(f"{name} must be {H} x {W}")
            object.__setattr__(self, name, _frozen(a))
        inc = np.asarray(self.ring_inclinations, dtype=np.float64)
        if inc.shape != (H,):
            raise ValueError("one inclination per ring required")
        dif = np.diff(inc)
        if H > 1 and not (np.all(dif > 0) or np.all(dif < 0)):
            raise ValueError("ring inclinations must be strictly monotone")
        if np.abs(np.linalg.norm(d, axis=-1) - 1.0).max(initial=0.0) > 1e-9:
            raise ValueError("directions must have unit norm")
        if np.any(self.ranges < 0):
            raise ValueError("ranges must be non-negative")
        object.__setattr__(self, "directions", _frozen(d))
        object.__setattr__(self, "ring_inclinations", _frozen(inc))

    @property
    def height(self) -> int:
        return self.directions.shape[0]

    @property
    def width(self) -> int:
        return self.directions.shape[1]

    @property
    def timestamp(self) -> float:
        return self.pose.timestamp

    def points(self) -> np.ndarray:
        """Compensated returns in the common frame, H x W x 3 (zeros where no return)."""
        return self.directions * self.ranges[..., None]


@dataclass(frozen=True, eq=False)
class Segment:
    id: int
    points: np.ndarray
    observations: tuple = ()
    class_label: int = -1
    centroid: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", _frozen(pts))
        c = pts.mean(axis=0) if len(pts) else np.full(3, np.nan)
        object.__setattr__(self, "centroid", _frozen(c))
        obs = tuple((float(t), int(n)) for t, n in self.observations)
        counts = [n for _, n in obs]
        if any(b < a for a, b in zip(counts, counts[1:])):
            raise ValueError("observation point counts must be non-decreasing")
        object.__setattr__(self, "observations", obs)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class VisualView:
    intensity: np.ndarray
    range: np.ndarray
    mask: np.ndarray
    timestamp: float = 0.0
    mask_area: int = field(default=0)

    def __post_init__(self):
        inten = np.asarray(self.intensity)
        rng = np.asarray(self.range)
        mask = np.asarray(self.mask).astype(np.uint8)
        if not (inten.shape == rng.shape == mask.shape) or inten.ndim != 2:
            raise ValueError("intensity, range and mask shapes differ")
        if np.any(mask > 1):
            raise ValueError("mask must be binary")
        if np.any(mask[rng == 0]):
            raise ValueError("mask set on a pixel without return")
        for name, a in (("intensity", inten), ("range", rng), ("mask", mask)):
            if a.flags.writeable:
                a = a.view()
                a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "mask_area", int(mask.sum()))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @property
    def shape(self):
        return self.mask.shape


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (DESCRIPTOR_DIM,):
            raise ValueError(f"descriptor must have {DESCRIPTOR_DIM} components")
        if not np.all(np.isfinite(v)):
            raise ValueError("descriptor has non-finite components")
        object.__setattr__(self, "values", _frozen(v))


@dataclass(frozen=True)
class Completeness:
    value: float

    def __post_init__(self):
        if not (0.0 < self.value <= 1.0):
            raise ValueError("completeness must lie in (0, 1]")

    def __float__(self) -> float:
        return self.value


def completeness(segment_at_t: Segment, final_segment: Segment) -> Completeness:
    if segment_at_t.id != final_segment.id:
        raise ValueError("segment identity mismatch")
    if len(final_segment) == 0:
        raise ValueError("final segment is empty")
    return Completeness(len(segment_at_t) / len(final_segment))
