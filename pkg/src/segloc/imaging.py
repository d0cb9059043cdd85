"""Intensity/range images, segment masks and angular interpolation."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RayGrid, Segment, VisualView, nominal_directions

TWO_PI = 2.0 * np.pi
DEFAULT_RANGE_TOLERANCE = 0.2


@dataclass(frozen=True)
class ProjectionMargins:
    rows: int = 16
    cols: int = 32

    def check(self, height: int, width: int) -> None:
        if not 1 <= self.rows <= height:
            raise ValueError(f"row margin must lie in [1, {height}]")
        if not 1 <= self.cols <= width // 2:
            raise ValueError(f"column margin must lie in [1, {width // 2}]")


def _as_points(p) -> Tuple[np.ndarray, bool]:
    P = np.asarray(p, dtype=np.float64)
    single = P.ndim == 1
    P = P.reshape(-1, 3)
    if np.any(np.linalg.norm(P, axis=1) == 0):
        raise ValueError("cannot project a zero-norm point")
    return P, single


def inclination_azimuth(P: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    alpha = np.arctan2(P[:, 2], np.hypot(P[:, 0], P[:, 1]))
    beta = np.mod(np.arctan2(P[:, 1], P[:, 0]), TWO_PI)
    return alpha, beta


def _nearest_ring(alpha: np.ndarray, inclinations: np.ndarray) -> np.ndarray:
    # argmin keeps the first (smallest) ring index on ties
    return np.argmin(np.abs(inclinations[None, :] - alpha[:, None]), axis=1)


def simple_project(p, grid: RayGrid):
    """Nearest ring by inclination, column by rounded azimuth (wraps at W)."""
    P, single = _as_points(p)
    alpha, beta = inclination_azimuth(P)
    W = grid.width
    r = _nearest_ring(alpha, grid.ring_inclinations)
    c = np.floor(beta / TWO_PI * W + 0.5).astype(np.int64) % W
    if single:
        return int(r[0]), int(c[0])
    return r, c


def _best_in_window(P, grid, r, c, margins):
    """Exhaustive argmax of n_ij . p over each point's window."""
    H, W = grid.height, grid.width
    dirs = grid.directions
    out_r = np.empty(len(P), dtype=np.int64)
    out_c = np.empty(len(P), dtype=np.int64)
    dr = np.arange(-margins.rows, margins.rows)
    dc = np.arange(-margins.cols, margins.cols)
    chunk = 1024
    for s in range(0, len(P), chunk):
        pp = P[s:s + chunk]
        rows = r[s:s + chunk, None] + dr[None, :]
        valid_r = (rows >= 0) & (rows < H)
        rows = np.clip(rows, 0, H - 1)
        cols = (c[s:s + chunk, None] + dc[None, :]) % W
        n = dirs[rows[:, :, None], cols[:, None, :]]
        score = np.einsum("nijk,nk->nij", n, pp)
        score = np.where(valid_r[:, :, None], score, -np.inf)
        best = score.reshape(len(pp), -1).max(axis=1)
        lin = rows[:, :, None] * W + cols[:, None, :]
        lin = np.where(score == best[:, None, None], lin, H * W)
        pick = lin.reshape(len(pp), -1).min(axis=1)
        out_r[s:s + chunk] = pick // W
        out_c[s:s + chunk] = pick % W
    return out_r, out_c


class AlignedProjector:
    """Closest-ray-direction projection restricted to a window around the
    simple projection.

    A k-d tree over the stored directions finds each point's globally closest
    rays; when the best of them lies inside the window it is also the window
    optimum. Remaining points fall back to an exhaustive window scan, so the
    result always equals the windowed argmin.
    """

    def __init__(self, grid: RayGrid, margins: ProjectionMargins = ProjectionMargins(), k: int = 8):
        margins.check(grid.height, grid.width)
        self.grid = grid
        self.margins = margins
        self.k = min(k, grid.height * grid.width)
        self._flat = grid.directions.reshape(-1, 3)
        self._tree = cKDTree(self._flat)

    def _in_window(self, rows, cols, r, c):
        H, W = self.grid.height, self.grid.width
        m = self.margins
        lo = np.maximum(r - m.rows, 0)
        hi = np.minimum(r + m.rows, H)
        dcol = (cols - (c - m.cols)) % W
        return (rows >= lo) & (rows < hi) & (dcol < 2 * m.cols)

    def project(self, p):
        P, single = _as_points(p)
        r, c = simple_project(P, self.grid)
        W = self.grid.width
        u = P / np.linalg.norm(P, axis=1, keepdims=True)
        _, idx = self._tree.query(u, k=self.k)
        idx = idx.reshape(len(P), -1)
        score = np.einsum("nkj,nj->nk", self._flat[idx], P)
        best = score.max(axis=1)
        lin = np.where(score == best[:, None], idx, np.iinfo(np.int64).max).min(axis=1)
        br, bc = lin // W, lin % W
        ok = self._in_window(br, bc, r, c)
        if not np.all(ok):
            bad = ~ok
            fr, fc = _best_in_window(P[bad], self.grid, r[bad], c[bad], self.margins)
            br = br.copy()
            bc = bc.copy()
            br[bad] = fr
            bc[bad] = fc
        if single:
            return int(br[0]), int(bc[0])
        return br, bc


def aligned_project(p, grid: RayGrid, margins: ProjectionMargins = ProjectionMargins()):
    """Pixel whose ray direction is closest in angle to ``p`` within the window
    ``[r - rows, r + rows) x [c - cols, c + cols)`` around the simple projection.
    Rows are clamped, columns wrap; ties go to the smallest (row, column)."""
    return AlignedProjector(grid, margins).project(p)


def aligned_project_window(p, grid: RayGrid, margins: ProjectionMargins = ProjectionMargins()):
    """Same contract as :func:`aligned_project`, by direct window scan only."""
    margins.check(grid.height, grid.width)
    P, single = _as_points(p)
    r, c = simple_project(P, grid)
    br, bc = _best_in_window(P, grid, r, c, margins)
    if single:
        return int(br[0]), int(bc[0])
    return br, bc


def compute_mask(segment, grid: RayGrid, margins: ProjectionMargins = ProjectionMargins(),
                 range_tolerance: float = DEFAULT_RANGE_TOLERANCE,
                 projector: Optional[AlignedProjector] = None, aligned: bool = True) -> np.ndarray:
    """Binary H x W mask of the pixels a segment projects onto.

    ``segment`` is a :class:`Segment` or an (N, 3) array in the common (map)
    frame; it is moved into the grid frame with ``grid.pose``. A pixel is set
    when a point lands on it and its distance agrees with the stored range
    within ``range_tolerance`` (occlusion check). ``aligned=False`` uses the
    naive simple projection instead, for comparison.
    """
    pts = segment.points if isinstance(segment, Segment) else np.asarray(segment, dtype=np.float64)
    mask = np.zeros((grid.height, grid.width), dtype=np.uint8)
    if len(pts) == 0:
        return mask
    P = grid.pose.inverse().apply(pts)
    dist = np.linalg.norm(P, axis=1)
    P = P[dist > 0]
    dist = dist[dist > 0]
    if aligned:
        proj = projector if projector is not None else AlignedProjector(grid, margins)
        rows, cols = proj.project(P)
    else:
        rows, cols = simple_project(P, grid)
    measured = grid.ranges[rows, cols]
    keep = (measured > 0) & (np.abs(measured - dist) <= range_tolerance)
    mask[rows[keep], cols[keep]] = 1
    return mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 1.0


# --------------------------------------------------------------------------
# angular bilinear interpolation for irregular scans
# --------------------------------------------------------------------------


# angular offsets below this are trigonometric roundoff of an on-grid sample
SNAP = 1e-12


def interpolate_irregular(directions, ranges, intensities, ring_inclinations, width: int):
    """Resample irregular returns onto the regular (ring, column) grid.

    For every grid direction the nearest sample in each of the four quadrants
    around it is kept; a quadrant spans from the grid direction to the
    neighbouring grid directions (closed bins). Upper and lower pairs are
    interpolated in azimuth, then the two results in inclination. Pixels with
    an empty quadrant are left at 0 (no return).
    """
    D = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    rng = np.asarray(ranges, dtype=np.float64).ravel()
    val = np.asarray(intensities, dtype=np.float64).ravel()
    inc = np.asarray(ring_inclinations, dtype=np.float64)
    H, W = len(inc), int(width)
    out_i = np.zeros((H, W))
    out_r = np.zeros((H, W))
    if len(D) == 0:
        return out_i, out_r
    alpha, beta = inclination_azimuth(D)
    dbeta_grid = TWO_PI / W
    # extent of the bins above/below each ring (0 at the outermost rings)
    up = np.zeros(H)
    down = np.zeros(H)
    order = np.argsort(inc)
    s_inc = inc[order]
    gaps = np.diff(s_inc)
    up[order[:-1]] = gaps
    down[order[1:]] = gaps

    col_f = beta / dbeta_grid
    ring_pos = np.interp(alpha, s_inc, np.arange(H))
    keys, dists, sidx, dalphas, dbetas = [], [], [], [], []
    base_c = np.floor(col_f).astype(np.int64)
    base_k = np.floor(ring_pos).astype(np.int64)
    for dk in (-1, 0, 1, 2):
        k = np.clip(base_k + dk, 0, H - 1)
        r = order[k]
        da = alpha - inc[r]
        da[np.abs(da) <= SNAP] = 0.0
        in_up = (da >= 0) & (da <= up[r])
        in_dn = (da <= 0) & (-da <= down[r])
        for dcol in (-1, 0, 1, 2):
            c = (base_c + dcol) % W
            db = np.mod(beta - c * dbeta_grid + np.pi, TWO_PI) - np.pi
            db[np.abs(db) <= SNAP] = 0.0
            in_right = (db >= 0) & (db <= dbeta_grid)
            in_left = (db <= 0) & (-db <= dbeta_grid)
            d2 = da * da + db * db
            for q, m in enumerate((in_up & in_left, in_up & in_right, in_dn & in_left, in_dn & in_right)):
                sel = np.nonzero(m)[0]
                keys.append((r[sel] * W + c[sel]) * 4 + q)
                dists.append(d2[sel])
                sidx.append(sel)
                dalphas.append(da[sel])
                dbetas.append(db[sel])
    keys = np.concatenate(keys)
    dists = np.concatenate(dists)
    sidx = np.concatenate(sidx)
    dalphas = np.concatenate(dalphas)
    dbetas = np.concatenate(dbetas)
    o = np.lexsort((sidx, dists, keys))
    keys, sidx, dalphas, dbetas = keys[o], sidx[o], dalphas[o], dbetas[o]
    first = np.ones(len(keys), dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    keys, sidx, dalphas, dbetas = keys[first], sidx[first], dalphas[first], dbetas[first]

    n_pix = H * W
    have = np.zeros((n_pix, 4), dtype=bool)
    qa = np.zeros((n_pix, 4))
    qb = np.zeros((n_pix, 4))
    qi = np.zeros((n_pix, 4))
    qr = np.zeros((n_pix, 4))
    pix, quad = keys // 4, keys % 4
    have[pix, quad] = True
    qa[pix, quad] = dalphas
    qb[pix, quad] = dbetas
    qi[pix, quad] = val[sidx]
    qr[pix, quad] = rng[sidx]
    full = have.all(axis=1)

    def hinterp(left, right, f):
        bl, br = qb[:, left], qb[:, right]
        span = br - bl
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where(span > 0, -bl / span, 0.5)
        return f[:, left] + w * (f[:, right] - f[:, left])

    au, ad = hinterp(0, 1, qa), hinterp(2, 3, qa)
    iu, idn = hinterp(0, 1, qi), hinterp(2, 3, qi)
    ru, rdn = hinterp(0, 1, qr), hinterp(2, 3, qr)
    span = au - ad
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(span > 0, -ad / span, 0.5)
    vi = idn + w * (iu - idn)
    vr = rdn + w * (ru - rdn)
    out_i.ravel()[full] = vi[full]
    out_r.ravel()[full] = vr[full]
    return out_i, out_r


def grid_from_samples(directions, ranges, intensities, ring_inclinations, width: int, pose=None) -> RayGrid:
    """Regular-grid RayGrid from irregular, already motion-compensated returns."""
    inten, rng = interpolate_irregular(directions, ranges, intensities, ring_inclinations, width)
    dirs = nominal_directions(ring_inclinations, width)
    H = len(ring_inclinations)
    kw = {} if pose is None else {"pose": pose}
    t = 0.0 if pose is None else pose.timestamp
    return RayGrid(dirs, rng, inten, np.full((H, width), t), ring_inclinations, **kw)


# --------------------------------------------------------------------------
# views and export
# --------------------------------------------------------------------------


def build_visual_view(grid: RayGrid, mask: np.ndarray) -> VisualView:
    mask = np.asarray(mask)
    if mask.shape != (grid.height, grid.width):
        raise ValueError(f"mask shape {mask.shape} does not match grid {(grid.height, grid.width)}")
    return VisualView(grid.intensities, grid.ranges, mask.astype(np.uint8), grid.timestamp)


RANGE_STEP = 0.004


def write_pgm(path, image: np.ndarray, maxval: int) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError("image values out of range for PGM")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(img.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos:], dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def quantize_intensity(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 65535).astype(np.int64)


def quantize_range(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) / RANGE_STEP), 0, 65535).astype(np.int64)


def write_csv_image(path, image: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in np.asarray(image, dtype=np.float64):
            w.writerow([repr(float(v)) for v in row])


def read_csv_image(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as f:
        return np.array([[float(v) for v in row] for row in csv.reader(f)], dtype=np.float64)


def export_view(directory, view: VisualView, stem: str = "view") -> None:
    """16-bit PGM intensity (full scale = 1.0) and range (4 mm steps), 8-bit
    PGM mask, plus exact CSV copies of all three."""
    os.makedirs(directory, exist_ok=True)
    j = os.path.join
    write_pgm(j(directory, f"{stem}_intensity.pgm"), quantize_intensity(view.intensity), 65535)
    write_pgm(j(directory, f"{stem}_range.pgm"), quantize_range(view.range), 65535)
    write_pgm(j(directory, f"{stem}_mask.pgm"), view.mask.astype(np.int64) * 255, 255)
    write_csv_image(j(directory, f"{stem}_intensity.csv"), view.intensity)
    write_csv_image(j(directory, f"{stem}_range.csv"), view.range)
    write_csv_image(j(directory, f"{stem}_mask.csv"), view.mask)
    with open(j(directory, f"{stem}_meta.csv"), "w", encoding="utf-8") as f:
        f.write(f"timestamp,mask_area\n{view.timestamp!r},{view.mask_area}\n")


def load_view(directory, stem: str = "view") -> VisualView:
    j = os.path.join
    with open(j(directory, f"{stem}_meta.csv"), encoding="utf-8") as f:
        f.readline()
        ts = float(f.readline().split(",")[0])
    return VisualView(
        read_csv_image(j(directory, f"{stem}_intensity.csv")),
        read_csv_image(j(directory, f"{stem}_range.csv")),
        read_csv_image(j(directory, f"{stem}_mask.csv")).astype(np.uint8),
        ts,
    )
