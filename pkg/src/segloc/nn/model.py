"""Two-branch segment descriptor network.

Visual branch (intensity, range, mask image):
    conv 3->16 5x5/2, ReLU, conv 16->32 5x5/2, ReLU, conv 32->64 3x3/2, ReLU
    (the last spatial layer, used for attention), global average pool.
Geometry branch (32x32x16 occupancy):
    conv3d 1->8, ReLU, maxpool 2, conv3d 8->16, ReLU, maxpool 2, fc 128, ReLU.
Merge: concat, fc -> 64-d descriptor. Training head: fc 64 -> n_classes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..geometry import DESCRIPTOR_DIM
from . import autodiff as ad

MAGIC = b"SEGNET1"


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 2
    image_height: int = 64
    image_width: int = 256
    voxel_dims: Tuple[int, int, int] = (32, 32, 16)
    descriptor_dim: int = DESCRIPTOR_DIM
    visual_channels: Tuple[int, int, int] = (16, 32, 64)
    visual_kernels: Tuple[int, int, int] = (5, 5, 3)
    geometry_channels: Tuple[int, int] = (8, 16)
    geometry_fc: int = 128
    linear_only: bool = False

    def geometry_flat(self) -> int:
        d = np.asarray(self.voxel_dims) // 4
        return int(self.geometry_channels[1] * np.prod(d))


class ForwardError(FloatingPointError):
    pass


def _layer_shapes(cfg: ModelConfig) -> List[Tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every parameter, in checkpoint order."""
    shapes = []
    if cfg.linear_only:
        nvox = int(np.prod(cfg.voxel_dims))
        shapes += [("geo_fc.W", (nvox, cfg.geometry_fc), nvox), ("geo_fc.b", (cfg.geometry_fc,), 0)]
        merge_in = cfg.geometry_fc + 3
    else:
        cin = 3
        for i, (cout, k) in enumerate(zip(cfg.visual_channels, cfg.visual_kernels)):
            fan = cin * k * k
            shapes += [(f"vis{i}.W", (cout, cin, k, k), fan), (f"vis{i}.b", (cout,), 0)]
            cin = cout
        c0, c1 = cfg.geometry_channels
        shapes += [("geo0.W", (c0, 1, 3, 3, 3), 27), ("geo0.b", (c0,), 0)]
        shapes += [("geo1.W", (c1, c0, 3, 3, 3), 27 * c0), ("geo1.b", (c1,), 0)]
        flat = cfg.geometry_flat()
        shapes += [("geo_fc.W", (flat, cfg.geometry_fc), flat), ("geo_fc.b", (cfg.geometry_fc,), 0)]
        merge_in = cfg.geometry_fc + cfg.visual_channels[-1]
    shapes += [("merge.W", (merge_in, cfg.descriptor_dim), merge_in), ("merge.b", (cfg.descriptor_dim,), 0)]
    shapes += [("head.W", (cfg.descriptor_dim, cfg.n_classes), cfg.descriptor_dim), ("head.b", (cfg.n_classes,), 0)]
    return shapes


@dataclass
class NetParams:
    config: ModelConfig
    weights: Dict[str, np.ndarray]
    seed: int = 0
    intensity_stats: Tuple[float, float] = (0.0, 1.0)
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def astype(self, dtype) -> "NetParams":
        return NetParams(self.config, {k: v.astype(dtype) for k, v in self.weights.items()},
                         self.seed, self.intensity_stats, dict(self.meta))

    def copy(self) -> "NetParams":
        return self.astype(self.dtype)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.weights.values())

    def n_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> NetParams:
    """Seeded uniform fan-in initialisation; biases start at zero."""
    rng = np.random.default_rng(seed)
    w = {}
    for name, shape, fan in _layer_shapes(config):
        if name.endswith(".b"):
            w[name] = np.zeros(shape, dtype=dtype)
        else:
            gain = 6.0 if not name.startswith(("merge", "head")) else 3.0
            bound = np.sqrt(gain / fan)
            w[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return NetParams(config, w, seed)


@dataclass
class Output:
    descriptor: ad.Tensor
    logits: ad.Tensor
    activations: Optional[ad.Tensor]
    trace: Optional[list] = None


def _check(t: ad.Tensor, layer: str) -> ad.Tensor:
    if not np.all(np.isfinite(t.data)):
        raise ForwardError(f"non-finite activation in layer {layer}")
    return t


def forward(params: NetParams, voxels: np.ndarray, visual: np.ndarray,
            tensors: Optional[Dict[str, ad.Tensor]] = None, trace: Optional[list] = None) -> Output:
    """Run both branches on a batch.

    ``voxels`` is (N, 32, 32, 16) or a single grid; ``visual`` is (N, 3, H, W)
    or a single tensor. Pass ``tensors`` (from :func:`as_tensors`) to
    collect gradients; ``trace`` receives every ReLU on/off pattern and
    max-pool choice.
    """
    cfg = params.config
    dt = params.dtype
    vox = np.asarray(voxels, dtype=dt)
    vis = np.asarray(visual, dtype=dt)
    if vox.ndim == 3:
        vox = vox[None]
    if vis.ndim == 3:
        vis = vis[None]
    if vox.shape[1:] != tuple(cfg.voxel_dims) or vis.shape[1] != 3 or len(vox) != len(vis):
        raise ValueError(f"input shapes {vox.shape}, {vis.shape} do not match the model")
    P = tensors if tensors is not None else {k: ad.constant(v) for k, v in params.weights.items()}
    x_vis = ad.constant(vis)
    x_geo = ad.constant(vox[:, None])

    if cfg.linear_only:
        v = ad.global_avg_pool(x_vis)
        act = None
        g = ad.linear(ad.flatten(x_geo), P["geo_fc.W"], P["geo_fc.b"])
    else:
        h = x_vis
        for i, k in enumerate(cfg.visual_kernels):
            h = _check(ad.relu(ad.conv2d(h, P[f"vis{i}.W"], P[f"vis{i}.b"], stride=2, pad=k // 2), trace), f"vis{i}")
        act = h
        v = ad.global_avg_pool(h)
        g = _check(ad.relu(ad.conv3d(x_geo, P["geo0.W"], P["geo0.b"]), trace), "geo0")
        g = ad.maxpool3d(g, trace)
        g = _check(ad.relu(ad.conv3d(g, P["geo1.W"], P["geo1.b"]), trace), "geo1")
        g = ad.maxpool3d(g, trace)
        g = _check(ad.relu(ad.linear(ad.flatten(g), P["geo_fc.W"], P["geo_fc.b"]), trace), "geo_fc")
    merged = ad.concat([g, v], axis=1)
    desc = _check(ad.linear(merged, P["merge.W"], P["merge.b"]), "merge")
    logits = _check(ad.linear(desc, P["head.W"], P["head.b"]), "head")
    return Output(desc, logits, act, trace)


def as_tensors(params: NetParams) -> Dict[str, ad.Tensor]:
    return {k: ad.param(v, name=k) for k, v in params.weights.items()}


def describe(params: NetParams, voxels: np.ndarray, visual: np.ndarray, batch: int = 16) -> np.ndarray:
    """Descriptors (N, 64) in float64 for a batch of inputs."""
    vox = np.asarray(voxels)
    vis = np.asarray(visual)
    if vox.ndim == 3:
        vox, vis = vox[None], vis[None]
    out = [forward(params, vox[i:i + batch], vis[i:i + batch]).descriptor.data for i in range(0, len(vox), batch)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, params.config.descriptor_dim))


# --------------------------------------------------------------------------
# checkpoint: magic, JSON metadata, layer table, raw little-endian float32
# --------------------------------------------------------------------------


def save_checkpoint(path, params: NetParams) -> None:
    cfg = asdict(params.config)
    meta = {"config": cfg, "seed": params.seed, "intensity_stats": list(params.intensity_stats),
            "meta": params.meta}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    names = [n for n, _, _ in _layer_shapes(params.config)]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(names)))
        for n in names:
            a = params.weights[n]
            nb = n.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        for n in names:
            f.write(np.ascontiguousarray(params.weights[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> NetParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a SEGNET1 checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    table = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (nd,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{nd}I", data, pos)
        pos += 4 * nd
        table.append((name, shape))
    weights = {}
    for name, shape in table:
        size = int(np.prod(shape))
        weights[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    c = meta["config"]
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
    return NetParams(cfg, weights, meta["seed"], tuple(meta["intensity_stats"]), meta.get("meta", {}))
