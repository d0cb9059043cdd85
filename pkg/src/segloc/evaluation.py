"""Rank, closure and attention statistics, and the CSV/SVG report writer."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from .localization import SegmentDB

log = logging.getLogger(__name__)

INF = float("inf")
CLOSURE_THRESHOLD = 5.0


def rank_of(db: SegmentDB, descriptor, label: int, sequence: Optional[int] = None) -> float:
    """1-based position of the first entry with the same label; inf if none.

    Entries from ``sequence`` are skipped; order is (distance, segment id).
    """
    if len(db) == 0:
        return INF
    order, _ = db.ordered(descriptor, sequence)
    hits = np.nonzero(db.labels[order] == label)[0]
    return float(hits[0] + 1) if len(hits) else INF


def _quantile(x: np.ndarray, q: float) -> float:
    """Linear-interpolated quantile that tolerates inf values."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    if len(x) == 0:
        return float("nan")
    pos = q * (len(x) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(x) - 1)
    f = pos - lo
    if f == 0 or x[lo] == x[hi]:
        return float(x[lo])
    if not np.isfinite(x[hi]):
        return INF
    return float(x[lo] + f * (x[hi] - x[lo]))


RANK_HEADER = ["bin_lo", "bin_hi", "n", "median", "q1", "q3", "mean", "rank1_fraction"]


def completeness_bin(c: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bins over (0, 1]; bin b holds (b/bins, (b+1)/bins]."""
    c = np.asarray(c, dtype=np.float64)
    return np.clip(np.ceil(c * bins).astype(np.int64) - 1, 0, bins - 1)


def rank_vs_completeness(ranks, completeness, bins: int = 5) -> List[tuple]:
    """Per-bin (lo, hi, n, median, q1, q3, mean, fraction at rank 1).

    Empty bins have n = 0 and NaN statistics. The mean is inf when any
    query in the bin has no correct match.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    ranks = np.asarray(ranks, dtype=np.float64)
    b = completeness_bin(completeness, bins)
    rows = []
    for i in range(bins):
        r = ranks[b == i]
        lo, hi = i / bins, (i + 1) / bins
        if len(r) == 0:
            rows.append((lo, hi, 0, np.nan, np.nan, np.nan, np.nan, np.nan))
            continue
        rows.append((lo, hi, len(r), _quantile(r, 0.5), _quantile(r, 0.25), _quantile(r, 0.75),
                     float(r.mean()), float(np.mean(r == 1))))
    return rows


def median_non_increasing(rows) -> bool:
    med = [r[3] for r in rows if r[2] > 0]
    return all(b <= a for a, b in zip(med, med[1:]))


@dataclass(frozen=True)
class ClosureStats:
    n_correct: int
    n_incorrect: int
    mean_error: Optional[float]

    def mean_error_text(self) -> str:
        return "n/a" if self.mean_error is None else f"{self.mean_error:.3f}"


def closure_stats(errors_or_closures, ground_truth: Optional[Callable] = None,
                  threshold: float = CLOSURE_THRESHOLD) -> ClosureStats:
    """Correct (error <= threshold) and incorrect counts plus mean correct error.

    Accepts translational errors directly, or closures together with a
    ``ground_truth(closure) -> error or None`` callable; closures without
    ground truth are skipped with a warning.
    """
    errs = []
    for c in errors_or_closures:
        if ground_truth is not None:
            e = ground_truth(c)
            if e is None:
                log.warning("no ground truth for closure at t=%s; skipped", getattr(c, "timestamp", "?"))
                continue
        else:
            e = getattr(c, "error", c)
            if e is None:
                log.warning("closure without error; skipped")
                continue
        errs.append(float(e))
    errs = np.sort(np.array(errs))
    good = errs[errs <= threshold]
    mean = float(np.mean(good)) if len(good) else None
    return ClosureStats(len(good), int(len(errs) - len(good)), mean)


ATTENTION_HEADER = ["bin", "rank_lo", "rank_hi", "n", "mean_score", "n_unbounded"]


def attention_vs_rank(scores, ranks, bins: int = 10) -> Tuple[List[tuple], str]:
    """Sort by rank, split into equal-count bins, mean score per bin.

    Unbounded scores are counted separately and left out of the mean.
    Returns (rows, note); the note says when fewer bins were possible.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ranks = np.asarray(ranks, dtype=np.float64)
    n = len(scores)
    nb = min(bins, n)
    note = "" if nb == bins else f"only {n} segments: {nb} bins"
    order = np.lexsort((np.arange(n), ranks))
    rows = []
    for i, part in enumerate(np.array_split(order, nb) if nb else []):
        s = scores[part]
        fin = s[np.isfinite(s)]
        rows.append((i, float(ranks[part].min()), float(ranks[part].max()), len(part),
                     float(fin.mean()) if len(fin) else float("nan"), int(len(s) - len(fin))))
    return rows, note


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(header))
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


class _Axes:
    """Maps data to a fixed SVG plot box."""

    def __init__(self, xlim, ylim, width=480, height=300, margin=50):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1
        self.w, self.h, self.m = width, height, margin

    def px(self, x):
        return self.m + (x - self.x0) / (self.x1 - self.x0) * (self.w - 2 * self.m)

    def py(self, y):
        return self.h - self.m - (y - self.y0) / (self.y1 - self.y0) * (self.h - 2 * self.m)

    def frame(self, title, xlabel, ylabel):
        m, w, h = self.m, self.w, self.h
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
               f'<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>',
               f'<path d="M{m} {m}V{h - m}H{w - m}" stroke="#000000" fill="none"/>',
               f'<text x="{w / 2:g}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
               f'<text x="{w / 2:g}" y="{h - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
               f'<text x="14" y="{h / 2:g}" font-size="12" transform="rotate(-90 14 {h / 2:g})" '
               f'text-anchor="middle">{escape(ylabel)}</text>']
        for v in np.linspace(self.x0, self.x1, 5):
            out.append(f'<text x="{self.px(v):.1f}" y="{h - m + 15}" text-anchor="middle" font-size="10">{_fmt(v)}</text>')
        for v in np.linspace(self.y0, self.y1, 5):
            out.append(f'<text x="{m - 5}" y="{self.py(v) + 3:.1f}" text-anchor="end" font-size="10">{_fmt(v)}</text>')
        return out


def svg_line_plot(path, x, y, title="", xlabel="", ylabel="", band=None) -> None:
    """Polyline with optional (lo, hi) band; non-finite points are skipped."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    vals = [y[ok]]
    if band is not None:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in band)
        bok = ok & np.isfinite(lo) & np.isfinite(hi)
        vals += [lo[bok], hi[bok]]
    allv = np.concatenate(vals) if vals else np.zeros(0)
    xl = (float(x[ok].min()), float(x[ok].max())) if ok.any() else (0.0, 1.0)
    yl = (min(0.0, float(allv.min())), float(allv.max())) if len(allv) else (0.0, 1.0)
    ax = _Axes(xl, yl)
    out = ax.frame(title, xlabel, ylabel)
    if band is not None and bok.sum() >= 2:
        up = " ".join(f"L{ax.px(a):.1f} {ax.py(b):.1f}" for a, b in zip(x[bok], hi[bok]))
        down = " ".join(f"L{ax.px(a):.1f} {ax.py(b):.1f}" for a, b in zip(x[bok][::-1], lo[bok][::-1]))
        out.append(f'<path d="M{up[1:]} {down}Z" fill="#9ecae1" stroke="none"/>')
    if ok.sum():
        d = " ".join(f"L{ax.px(a):.1f} {ax.py(b):.1f}" for a, b in zip(x[ok], y[ok]))
        out.append(f'<path d="M{d[1:]}" stroke="#08519c" stroke-width="2" fill="none"/>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(out) + "\n")


def svg_histogram(path, values, bins: int = 20, title="", xlabel="", ylabel="count") -> None:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    counts, edges = np.histogram(v, bins=bins) if len(v) else (np.zeros(bins, int), np.linspace(0, 1, bins + 1))
    ax = _Axes((float(edges[0]), float(edges[-1])), (0.0, float(max(counts.max(), 1))))
    out = ax.frame(title, xlabel, ylabel)
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        if c:
            x, y = ax.px(a), ax.py(c)
            out.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{ax.px(b) - x:.1f}" height="{ax.py(0) - y:.1f}" '
                       f'fill="#6baed6" stroke="#08519c"/>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(out) + "\n")


def emit_report(directory, tables: Mapping[str, Tuple[Sequence[str], Sequence]], config: Mapping,
                plots: Optional[Mapping[str, Callable[[str], None]]] = None) -> Dict[str, str]:
    """Write ``{name}.csv`` per table, ``{name}.svg`` per plot, and ``manifest.json``.

    ``plots`` maps a name to a callable that writes the SVG at the given
    path. Nothing time- or host-dependent is written, so reruns are
    byte-identical.
    """
    os.makedirs(directory, exist_ok=True)
    if not os.access(directory, os.W_OK):
        raise PermissionError(f"{directory} is not writable")
    written = {}
    for name in sorted(tables):
        header, rows = tables[name]
        p = os.path.join(directory, f"{name}.csv")
        write_table(p, header, rows)
        written[name] = p
    for name in sorted(plots or {}):
        p = os.path.join(directory, f"{name}.svg")
        plots[name](p)
        written[name + ".svg"] = p
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(_jsonable(config), f, indent=1, sort_keys=True)
        f.write("\n")
    return written


def _jsonable(x):
    if isinstance(x, Mapping):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if hasattr(x, "__dataclass_fields__"):
        from dataclasses import asdict
        return _jsonable(asdict(x))
    return x


SVG_TAGS = {"svg", "path", "rect", "text", "g"}


def check_svg(path) -> None:
    """Parse the file and reject any element outside path/rect/text (plus svg/g)."""
    import xml.etree.ElementTree as ET
    root = ET.parse(path).getroot()
    for el in root.iter():
        tag = el.tag.split("}")[-1]
        if tag not in SVG_TAGS:
            raise ValueError(f"{path}: unexpected element <{tag}>")
