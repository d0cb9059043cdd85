"""Classification training, view selection, augmentation and gradient checks."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..geometry import VisualView
from . import autodiff as ad
from .model import ModelConfig, NetParams, as_tensors, forward, init_params

log = logging.getLogger(__name__)

MIN_MASK_AREA = 50
RANGE_STD_FLOOR = 1e-6


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 64
    seed: int = 0
    validation_fraction: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning rate, batch size and epochs must be positive")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------


def intensity_stats(views: Sequence[VisualView]) -> Tuple[float, float]:
    """Dataset-wide intensity mean and std over every pixel of every view."""
    if not views:
        raise ValueError("no views")
    n = 0
    s = 0.0
    s2 = 0.0
    for v in views:
        x = v.intensity
        n += x.size
        s += float(x.sum())
        s2 += float((x * x).sum())
    mean = s / n
    std = float(np.sqrt(max(s2 / n - mean * mean, 0.0)))
    return mean, std


def normalize_inputs(view: VisualView, stats: Tuple[float, float]) -> np.ndarray:
    """(3, H, W) tensor: standardized intensity, mask-standardized range, mask.

    The range channel is centred and scaled with statistics of the masked
    pixels only, then applied to the whole channel.
    """
    mean, std = float(stats[0]), float(stats[1])
    if not std > 0:
        raise ValueError("dataset intensity std must be positive")
    if view.mask_area == 0:
        raise ValueError("view has an empty mask")
    m = view.mask.astype(bool)
    r = view.range[m]
    rmean = float(r.mean())
    rstd = float(r.std())
    if rstd < RANGE_STD_FLOOR:
        warnings.warn("range std over mask is zero; clamped", RuntimeWarning, stacklevel=2)
        rstd = RANGE_STD_FLOOR
    out = np.empty((3,) + view.intensity.shape)
    out[0] = (view.intensity - mean) / std
    out[1] = (view.range - rmean) / rstd
    out[2] = view.mask
    return out


def select_view(views: Sequence[VisualView], mode: str = "test", timestamp: Optional[float] = None,
                min_area: int = MIN_MASK_AREA) -> Optional[VisualView]:
    """Pick the view fed to the network.

    ``train``: the view taken at ``timestamp``. ``test``: the largest mask seen
    up to ``timestamp`` (all views if None); the earliest wins ties. Either
    way a mask smaller than ``min_area`` yields None.
    """
    if mode == "train":
        if timestamp is None:
            raise ValueError("train mode needs a timestamp")
        best = next((v for v in views if v.timestamp == timestamp), None)
    elif mode == "test":
        best = None
        for v in views:
            if timestamp is not None and v.timestamp > timestamp:
                break
            if best is None or v.mask_area > best.mask_area:
                best = v
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if best is None or best.mask_area < min_area:
        return None
    return best


def augment_rotate(tensor: np.ndarray, shift: int) -> np.ndarray:
    """Circular column shift of every channel."""
    return np.roll(tensor, int(shift), axis=-1)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


class Adam:
    def __init__(self, weights, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0

    def step(self, weights, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(weights):
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            weights[k] -= upd.astype(weights[k].dtype)


def loss_and_grads(params: NetParams, vox: np.ndarray, vis: np.ndarray, labels: np.ndarray):
    T = as_tensors(params)
    out = forward(params, vox, vis, T)
    loss = ad.softmax_cross_entropy(out.logits, np.asarray(labels))
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in T.items()}
    return float(loss.data), grads


def predict(params: NetParams, vox: np.ndarray, vis: np.ndarray, batch: int = 32) -> np.ndarray:
    out = [forward(params, vox[i:i + batch], vis[i:i + batch]).logits.data.argmax(axis=1)
           for i in range(0, len(vox), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def split_validation(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Stratified split: each class with >= 2 samples gives up round(fraction * n), at least 1."""
    labels = np.asarray(labels)
    train, val = [], []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        idx = idx[rng.permutation(len(idx))]
        nv = 0
        if fraction > 0 and len(idx) >= 2:
            nv = min(len(idx) - 1, max(1, int(round(fraction * len(idx)))))
        val.extend(idx[:nv].tolist())
        train.extend(idx[nv:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64)


@dataclass
class TrainResult:
    params: NetParams
    best_epoch: int
    history: List[Tuple[int, float, float, float]] = field(default_factory=list)
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None


def train(voxels: np.ndarray, visual: np.ndarray, labels: np.ndarray, config: TrainConfig = TrainConfig(),
          model_config: Optional[ModelConfig] = None, stats: Tuple[float, float] = (0.0, 1.0)) -> TrainResult:
    """Train the classification head on (voxels, normalized visual tensors, class).

    Returns the parameters of the epoch with the highest validation accuracy
    (earliest epoch on ties). History rows are
    (epoch, train loss, train accuracy, validation accuracy).
    """
    labels = np.asarray(labels, dtype=np.int64)
    vox = np.asarray(voxels, dtype=np.float32)
    vis = np.asarray(visual, dtype=np.float32)
    n_classes = int(labels.max()) + 1 if len(labels) else 0
    if len(np.unique(labels)) < 2:
        raise ValueError("training needs at least 2 classes")
    if not np.all(vis[:, 2].reshape(len(vis), -1).sum(axis=1) >= MIN_MASK_AREA):
        raise ValueError("every training view must pass the mask-area rule")
    mc = model_config or ModelConfig(n_classes=n_classes, image_height=vis.shape[2], image_width=vis.shape[3])
    params = init_params(mc, config.seed)
    params.intensity_stats = (float(stats[0]), float(stats[1]))
    rng = np.random.default_rng([config.seed, 1])
    tr, va = split_validation(labels, config.validation_fraction, rng)
    opt = Adam(params.weights, config.learning_rate, config.beta1, config.beta2, config.eps)
    W = vis.shape[-1]
    best = None
    best_acc = -1.0
    best_epoch = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = tr[rng.permutation(len(tr))]
        total = 0.0
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            xb = vis[idx]
            if config.augment:
                shifts = rng.integers(0, W, size=len(idx))
                xb = np.stack([augment_rotate(x, s) for x, s in zip(xb, shifts)])
            loss, grads = loss_and_grads(params, vox[idx], xb, labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b // config.batch_size}; "
                                    f"max |w| = {max(float(np.abs(w).max()) for w in params.weights.values()):.3g}")
            opt.step(params.weights, grads)
            if not params.all_finite():
                raise TrainingError(f"non-finite parameters after epoch {epoch}, batch {b // config.batch_size}")
            total += loss * len(idx)
        train_loss = total / max(len(order), 1)
        train_acc = float(np.mean(predict(params, vox[tr], vis[tr]) == labels[tr]))
        val_acc = float(np.mean(predict(params, vox[va], vis[va]) == labels[va])) if len(va) else train_acc
        history.append((epoch, train_loss, train_acc, val_acc))
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, train_loss, train_acc, val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best = params.copy()
    best.meta = {"best_epoch": str(best_epoch), "best_val_accuracy": repr(best_acc)}
    return TrainResult(best, best_epoch, history, tr, va)


def write_manifest(path, history) -> None:
    """Per-epoch CSV: ``epoch,train_loss,train_accuracy,val_accuracy``."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_accuracy", "val_accuracy"])
        for e, loss, tacc, vacc in history:
            w.writerow([e, repr(float(loss)), repr(float(tacc)), repr(float(vacc))])


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------


def _trace_equal(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _loss64(params, vox, vis, labels, trace=None):
    out = forward(params, vox, vis, trace=trace)
    return float(ad.softmax_cross_entropy(out.logits, labels).data)


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_rejected: int
    analytic: np.ndarray
    numeric: np.ndarray
    names: List[str]


def relative_error(a, n, floor: float = 1e-6):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradient_check(params: NetParams, voxels, visual, labels, n_params: int = 200, step: float = 1e-5,
                   seed: int = 0, floor: float = 1e-6) -> GradCheckResult:
    """Analytic vs central-difference gradients on randomly drawn parameters.

    Runs in float64. A parameter whose +-step perturbation changes any ReLU
    on/off pattern or max-pool choice sits on a kink and is redrawn.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    p = params.astype(np.float64)
    vox = np.asarray(voxels, dtype=np.float64)
    vis = np.asarray(visual, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    _, grads = loss_and_grads(p, vox, vis, labels)
    base_trace: list = []
    forward(p, vox, vis, trace=base_trace)
    names = sorted(p.weights)
    sizes = np.array([p.weights[k].size for k in names])
    cum = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    ana, num, picked = [], [], []
    rejected = 0
    tried = set()
    while len(ana) < n_params and len(tried) < cum[-1]:
        flat = int(rng.integers(cum[-1]))
        if flat in tried:
            continue
        tried.add(flat)
        li = int(np.searchsorted(cum, flat, side="right"))
        name = names[li]
        off = flat - (cum[li - 1] if li else 0)
        w = p.weights[name].reshape(-1)
        orig = w[off]
        w[off] = orig + step
        tp: list = []
        lp = _loss64(p, vox, vis, labels, tp)
        w[off] = orig - step
        tm: list = []
        lm = _loss64(p, vox, vis, labels, tm)
        w[off] = orig
        if not (_trace_equal(tp, base_trace) and _trace_equal(tm, base_trace)):
            rejected += 1
            continue
        ana.append(float(grads[name].reshape(-1)[off]))
        num.append((lp - lm) / (2.0 * step))
        picked.append(f"{name}[{off}]")
    ana_a = np.array(ana)
    num_a = np.array(num)
    err = float(relative_error(ana_a, num_a, floor).max()) if len(ana) else float("nan")
    return GradCheckResult(err, len(ana), rejected, ana_a, num_a, picked)
