"""ScoreCam heatmaps for the visual branch and the segment attention score.

Channel masks come from the last spatial activation layer. They are
weighted either by the class probability of the masked input or by how
little masking moves the descriptor; the weighted sum of upsampled
activations, clipped and min-max normalized, is the heatmap.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .imaging import write_pgm
from .nn import autodiff as ad
from .nn.model import NetParams, forward

DEFAULT_DILATION = 5


@dataclass(frozen=True, eq=False)
class Heatmap:
    values: np.ndarray
    layer: str = "vis2"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("heatmap must be 2-D")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("heatmap values must lie in [0, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def upsample_bilinear(a: np.ndarray, shape) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape
    H, W = shape

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0.0, n_in - 1)
        i0 = np.floor(x).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    r0, r1, fr = coords(h, H)
    c0, c1, fc = coords(w, W)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def channel_mask(A_k: np.ndarray, target) -> np.ndarray:
    """Upsampled, min-max normalized channel; constant channels give zeros."""
    A_k = np.asarray(A_k)
    if A_k.size == 0:
        raise ValueError("empty activation map")
    return minmax(upsample_bilinear(A_k, target))


def apply_mask(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """X o M: scale intensity and range, intersect the mask channel with M >= 0.5."""
    out = np.array(X, dtype=np.float64, copy=True)
    out[0] *= M
    out[1] *= M
    out[2] = out[2] * (M >= 0.5)
    return out


def _masked_batch(X, masks):
    return np.stack([apply_mask(X, M) for M in masks])


def _run(params: NetParams, voxels, batch_vis, batch=16):
    vox = np.asarray(voxels)
    outs_d, outs_l = [], []
    for i in range(0, len(batch_vis), batch):
        vb = batch_vis[i:i + batch]
        o = forward(params, np.broadcast_to(vox, (len(vb),) + vox.shape), vb)
        outs_d.append(o.descriptor.data.astype(np.float64))
        outs_l.append(o.logits.data.astype(np.float64))
    return np.concatenate(outs_d), np.concatenate(outs_l)


def activations(params: NetParams, X: np.ndarray, voxels) -> np.ndarray:
    """Last spatial activation maps (K, h, w) of the visual branch."""
    o = forward(params, voxels, X)
    return o.activations.data[0].astype(np.float64)


def class_weights_from_logits(logits: np.ndarray, target_class: int) -> np.ndarray:
    logits = np.atleast_2d(logits)
    if not 0 <= target_class < logits.shape[1]:
        raise IndexError(f"class {target_class} out of range 0..{logits.shape[1] - 1}")
    return ad.softmax(logits)[:, target_class]


def classification_weights(X, voxels, masks, params: NetParams, target_class: int) -> np.ndarray:
    """Softmax probability of ``target_class`` for each masked input."""
    if not 0 <= target_class < params.config.n_classes:
        raise IndexError(f"class {target_class} out of range 0..{params.config.n_classes - 1}")
    _, logits = _run(params, voxels, _masked_batch(X, masks))
    return class_weights_from_logits(logits, target_class)


def weights_from_distances(dist: np.ndarray) -> np.ndarray:
    """Inverse-distance weights summing to 1; exact zeros take all the weight."""
    dist = np.asarray(dist, dtype=np.float64)
    zero = dist == 0
    if zero.any():
        # first zero-distance channel, others get nothing
        w = np.zeros_like(dist)
        w[np.argmax(zero)] = 1.0
        return w
    inv = 1.0 / dist
    return inv / inv.sum()


def descriptor_distances(descriptors: np.ndarray, reference: np.ndarray, norm: str = "l2") -> np.ndarray:
    diff = np.asarray(descriptors, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
    if norm == "l2":
        return np.sqrt(np.sum(diff * diff, axis=1))
    if norm == "l1":
        return np.sum(np.abs(diff), axis=1)
    raise ValueError(f"unknown norm {norm!r}")


def descriptor_weights(X, voxels, masks, params: NetParams, norm: str = "l2") -> np.ndarray:
    """Weight of each channel mask from the descriptor shift it causes."""
    d, _ = _run(params, voxels, np.asarray(X)[None])
    if not np.all(np.isfinite(d)):
        raise FloatingPointError("reference descriptor is not finite")
    batch = _masked_batch(X, masks)
    dm, _ = _run(params, voxels, batch)
    dist = descriptor_distances(dm, d[0], norm)
    # an unchanged input has distance 0 exactly; batched GEMMs may round differently
    same = np.array([np.array_equal(b, X) for b in batch], dtype=bool)
    dist[same] = 0.0
    return weights_from_distances(dist)


def scorecam_heatmap(weights, A: np.ndarray, target, layer: str = "vis2") -> Heatmap:
    """max(sum_k w_k up(A_k), 0), min-max normalized (constant -> zeros)."""
    A = np.asarray(A, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(A):
        raise ValueError(f"{len(w)} weights for {len(A)} channels")
    acc = np.zeros(tuple(target))
    for k in range(len(A)):
        acc += w[k] * upsample_bilinear(A[k], target)
    return Heatmap(minmax(np.maximum(acc, 0.0)), layer)


def scorecam(X, voxels, params: NetParams, mode: str = "descriptor", target_class: Optional[int] = None,
             norm: str = "l2") -> Heatmap:
    """Full ScoreCam for one visual tensor: masks, weights, heatmap."""
    X = np.asarray(X, dtype=np.float64)
    target = X.shape[1:]
    A = activations(params, X, voxels)
    masks = [channel_mask(a, target) for a in A]
    if mode == "descriptor":
        w = descriptor_weights(X, voxels, masks, params, norm)
    elif mode == "class":
        w = classification_weights(X, voxels, masks, params, int(target_class))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return scorecam_heatmap(w, A, target)


def dilate_wrapped(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square dilation by ``radius`` pixels; columns wrap around the seam."""
    m = np.asarray(mask).astype(bool)
    if radius <= 0:
        return m
    W = m.shape[1]
    pad = min(radius, W)
    ext = np.concatenate([m[:, -pad:], m, m[:, :pad]], axis=1)
    d = ndimage.binary_dilation(ext, structure=np.ones((3, 3), bool), iterations=radius)
    out = d[:, pad:pad + W].copy()
    # a dilation longer than the image can wrap twice
    if radius > W:
        out[:] = out.any(axis=1, keepdims=True)
    return out


def attention_score(heatmap, mask: np.ndarray, dilation: int = DEFAULT_DILATION) -> float:
    """Mean heat over the dilated mask divided by mean heat elsewhere.

    A zero mean outside returns ``inf`` (unbounded).
    """
    H = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise ValueError("mask is empty")
    inside = dilate_wrapped(m, dilation)
    if inside.all():
        raise ValueError("mask complement is empty")
    num = float(H[inside].mean())
    den = float(H[~inside].mean())
    if den == 0.0:
        return float("inf")
    return num / den


def format_score(score: float) -> str:
    return "unbounded" if np.isinf(score) else repr(float(score))


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def write_heatmap(stem, heatmap: Heatmap) -> None:
    """``{stem}.pgm`` (8 bit) and ``{stem}.csv`` (exact)."""
    v = heatmap.values
    write_pgm(f"{stem}.pgm", np.round(v * 255).astype(np.uint8), 255)
    with open(f"{stem}.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in v:
            w.writerow([repr(float(x)) for x in row])


def _runs(row):
    """(start, length, value) of equal-valued runs."""
    edges = np.flatnonzero(np.diff(row)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [len(row)]])
    return zip(starts, ends - starts, row[starts])


def mask_contour(mask: np.ndarray, scale: float = 1.0) -> str:
    """SVG path data tracing the pixel edges between mask and background."""
    m = np.asarray(mask).astype(bool)
    H, W = m.shape
    parts = []
    pad = np.pad(m, 1)
    for r, c in zip(*np.nonzero(pad[1:-1, 1:-1] & ~pad[:-2, 1:-1])):
        parts.append(f"M{c * scale:g} {r * scale:g}h{scale:g}")
    for r, c in zip(*np.nonzero(pad[1:-1, 1:-1] & ~pad[2:, 1:-1])):
        parts.append(f"M{c * scale:g} {(r + 1) * scale:g}h{scale:g}")
    for r, c in zip(*np.nonzero(pad[1:-1, 1:-1] & ~pad[1:-1, :-2])):
        parts.append(f"M{c * scale:g} {r * scale:g}v{scale:g}")
    for r, c in zip(*np.nonzero(pad[1:-1, 1:-1] & ~pad[1:-1, 2:])):
        parts.append(f"M{(c + 1) * scale:g} {r * scale:g}v{scale:g}")
    return "".join(parts)


def overlay_svg(path, intensity: np.ndarray, heatmap: Heatmap, mask: np.ndarray,
                title: str = "", scale: float = 3.0, levels: int = 16) -> None:
    """Heatmap blended over the intensity image, mask outlined.

    Colours are quantized to ``levels`` steps per channel and emitted as
    run-length rects to keep the file small.
    """
    inten = np.asarray(intensity, dtype=np.float64)
    lo, hi = float(inten.min()), float(inten.max())
    g = (inten - lo) / (hi - lo) if hi > lo else np.zeros_like(inten)
    h = heatmap.values
    q = levels - 1
    red = np.round((0.5 * g + 0.5 * h) * q).astype(int)
    green = np.round(0.5 * g * q).astype(int)
    blue = np.round((0.5 * g + 0.5 * (1 - h)) * q * 0.6).astype(int)
    code = (red * levels + green) * levels + blue
    H, W = code.shape
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * scale:g}" height="{H * scale + 16:g}">']
    out.append(f'<text x="2" y="12" font-size="11" font-family="monospace">{title}</text>')
    out.append('<g transform="translate(0,16)">')

    def hexc(v):
        return f"{round(v * 255 / q):02x}"

    for r in range(H):
        for c, n, v in _runs(code[r]):
            rr, rem = divmod(int(v), levels * levels)
            gg, bb = divmod(rem, levels)
            out.append(f'<rect x="{c * scale:g}" y="{r * scale:g}" width="{n * scale:g}" height="{scale:g}" '
                       f'fill="#{hexc(rr)}{hexc(gg)}{hexc(bb)}"/>')
    d = mask_contour(mask, scale)
    if d:
        out.append(f'<path d="{d}" stroke="#00ff66" stroke-width="1" fill="none"/>')
    out.append("</g></svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(out) + "\n")


def batch_scores(heatmaps: Sequence[Heatmap], masks: Sequence[np.ndarray], dilation: int = DEFAULT_DILATION):
    return np.array([attention_score(h, m, dilation) for h, m in zip(heatmaps, masks)])
