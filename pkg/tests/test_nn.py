import numpy as np
import pytest

from segloc.nn import autodiff as ad
from segloc.nn.model import (ForwardError, ModelConfig, describe, forward, init_params, load_checkpoint,
                             save_checkpoint)
from segloc.nn.train import gradient_check, relative_error
from segloc.oracles import numeric_gradient

SMALL = ModelConfig(n_classes=3, image_height=32, image_width=64)


def naive_conv2d(x, W, b, stride, pad):
    N, C, H, Wd = x.shape
    F, _, k, _ = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (Wd + 2 * pad - k) // stride + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, f, i, j] = (patch * W[f]).sum() + b[f]
    return out


def naive_conv3d(x, W, b):
    N, C, D, H, Wd = x.shape
    F = W.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((N, F, D, H, Wd))
    for n in range(N):
        for f in range(F):
            for d in range(D):
                for i in range(H):
                    for j in range(Wd):
                        out[n, f, d, i, j] = (xp[n, :, d:d + 3, i:i + 3, j:j + 3] * W[f]).sum() + b[f]
    return out


def test_conv2d_forward_matches_loops(rng):
    x = rng.normal(size=(2, 3, 9, 11))
    W = rng.normal(size=(4, 3, 5, 5))
    b = rng.normal(size=4)
    got = ad.conv2d(ad.constant(x), ad.constant(W), ad.constant(b), stride=2, pad=2).data
    assert np.allclose(got, naive_conv2d(x, W, b, 2, 2), atol=1e-12)


def test_conv3d_forward_matches_loops(rng):
    x = rng.normal(size=(1, 2, 4, 5, 3))
    W = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    got = ad.conv3d(ad.constant(x), ad.constant(W), ad.constant(b)).data
    assert np.allclose(got, naive_conv3d(x, W, b), atol=1e-12)


def test_maxpool_forward(rng):
    x = rng.normal(size=(2, 3, 4, 6, 2))
    got = ad.maxpool3d(ad.constant(x)).data
    want = x.reshape(2, 3, 2, 2, 3, 2, 1, 2).max(axis=(3, 5, 7))
    assert np.array_equal(got, want)


@pytest.mark.parametrize("op", ["conv2d", "conv3d", "linear", "maxpool", "relu", "pool_concat"])
def test_op_gradients(op, rng):
    if op == "conv2d":
        shapes = [(2, 3, 7, 8), (4, 3, 3, 3), (4,)]
        f = lambda x, W, b: ad.conv2d(x, W, b, stride=2, pad=1)
    elif op == "conv3d":
        shapes = [(1, 2, 4, 4, 2), (3, 2, 3, 3, 3), (3,)]
        f = lambda x, W, b: ad.conv3d(x, W, b)
    elif op == "linear":
        shapes = [(3, 5), (5, 4), (4,)]
        f = ad.linear
    elif op == "maxpool":
        shapes = [(2, 2, 4, 4, 2)]
        f = ad.maxpool3d
    elif op == "relu":
        shapes = [(4, 7)]
        f = ad.relu
    else:
        shapes = [(2, 3, 4, 5), (2, 4)]
        f = lambda x, y: ad.concat([ad.global_avg_pool(x), ad.flatten(y)], axis=1)
    arrays = [rng.normal(size=s) for s in shapes]
    labels = np.array([0, 1, 2, 1, 0, 2][:shapes[0][0]])
    weights = rng.normal(size=(1000,))

    def loss_of(*ts):
        out = f(*ts)
        z = ad.flatten(out) if out.data.ndim > 2 else out
        proj = ad.constant(weights[:z.data.shape[1] * 3].reshape(z.data.shape[1], 3))
        return ad.softmax_cross_entropy(ad.linear(z, proj, ad.constant(np.zeros(3))), labels)

    ts = [ad.param(a) for a in arrays]
    loss_of(*ts).backward()
    for t, a in zip(ts, arrays):
        num = numeric_gradient(lambda: float(loss_of(*[ad.constant(x) for x in arrays]).data), a, 1e-6)
        assert np.abs(t.grad - num).max() < 1e-7


def test_softmax_is_simplex(rng):
    p = ad.softmax(rng.normal(size=(10, 7)) * 50)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def inputs(rng, n=2, cfg=SMALL, dtype=np.float64):
    vox = rng.random((n,) + cfg.voxel_dims)
    vis = rng.normal(size=(n, 3, cfg.image_height, cfg.image_width))
    vis[:, 2] = rng.random((n, cfg.image_height, cfg.image_width)) < 0.3
    return vox.astype(dtype), vis.astype(dtype)


def test_zero_everything_gives_zero_descriptor():
    p = init_params(SMALL)
    for w in p.weights.values():
        w[...] = 0
    d = describe(p, np.zeros((1,) + SMALL.voxel_dims), np.zeros((1, 3, 32, 64)))
    assert d.shape == (1, 64) and not d.any()


def test_forward_deterministic_and_width_independent(rng):
    p = init_params(SMALL, seed=3)
    vox, vis = inputs(rng, dtype=np.float32)
    assert describe(p, vox, vis).tobytes() == describe(p, vox, vis).tobytes()
    wide = np.concatenate([vis, vis], axis=-1)
    assert describe(p, vox, wide).shape == (2, 64)
    out = forward(p, vox, vis)
    assert out.activations.data.shape == (2, 64, 4, 8)


def test_column_shift_changes_descriptor(rng):
    p = init_params(SMALL, seed=3)
    vox, vis = inputs(rng, 1)
    shifted = np.roll(vis, 5, axis=-1)
    assert np.linalg.norm(describe(p, vox, vis) - describe(p, vox, shifted)) > 0


def test_nan_input_names_layer(rng):
    p = init_params(SMALL)
    vox, vis = inputs(rng, 1)
    vis[0, 0, 3, 3] = np.nan
    with pytest.raises(ForwardError, match="vis0"):
        forward(p, vox, vis)
    with pytest.raises(ValueError):
        forward(p, vox[:, :16], vis)


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(SMALL, seed=5)
    p.intensity_stats = (0.25, 0.125)
    p.meta = {"best_epoch": "3"}
    save_checkpoint(tmp_path / "m.segnet", p)
    q = load_checkpoint(tmp_path / "m.segnet")
    assert q.config == p.config and q.seed == 5 and q.intensity_stats == (0.25, 0.125)
    assert q.meta == p.meta
    assert all(q.weights[k].tobytes() == p.weights[k].tobytes() for k in p.weights)
    save_checkpoint(tmp_path / "n.segnet", q)
    assert (tmp_path / "m.segnet").read_bytes() == (tmp_path / "n.segnet").read_bytes()
    assert (tmp_path / "m.segnet").read_bytes().startswith(b"SEGNET1")
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


def test_init_is_seeded():
    a, b, c = init_params(SMALL, 1), init_params(SMALL, 1), init_params(SMALL, 2)
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
    assert not np.array_equal(a.weights["vis0.W"], c.weights["vis0.W"])
    assert not a.weights["vis0.b"].any()


def test_gradient_check_full_net(rng):
    p = init_params(SMALL, seed=0, dtype=np.float64)
    vox, vis = inputs(rng)
    r = gradient_check(p, vox, vis, [0, 2], n_params=200, seed=1)
    assert r.n_checked >= 200
    assert r.max_rel_error < 1e-4


def test_gradient_check_linear_only(rng):
    cfg = ModelConfig(n_classes=3, image_height=32, image_width=64, linear_only=True)
    p = init_params(cfg, seed=0, dtype=np.float64)
    vox, vis = inputs(rng, cfg=cfg)
    r = gradient_check(p, vox, vis, [0, 2], n_params=200, seed=1)
    assert r.n_checked >= 200 and r.n_rejected == 0
    # central differences at step 1e-5 carry ~1e-11 absolute roundoff in float64;
    # relative agreement to 1e-8 is only meaningful for gradients well above it
    assert np.abs(r.analytic - r.numeric).max() < 1e-10
    big = np.abs(r.analytic) >= 1e-2
    assert big.sum() > 10
    assert relative_error(r.analytic[big], r.numeric[big]).max() < 1e-8


def test_dead_relu_parameter_has_zero_gradient(rng):
    p = init_params(SMALL, seed=0, dtype=np.float64)
    # a geometry filter whose bias keeps it off everywhere
    p.weights["geo0.W"][0] = 0.0
    p.weights["geo0.b"][0] = -1.0
    vox, vis = inputs(rng)
    from segloc.nn.train import loss_and_grads
    _, g = loss_and_grads(p, vox, vis, np.array([0, 1]))
    assert np.abs(g["geo0.W"][0]).max() == 0 and g["geo0.b"][0] == 0
    w = p.weights["geo0.W"].reshape(-1)
    from segloc.nn.train import _loss64
    num = []
    for i in range(5):
        w[i] += 1e-5
        lp = _loss64(p, vox, vis, np.array([0, 1]))
        w[i] -= 2e-5
        lm = _loss64(p, vox, vis, np.array([0, 1]))
        w[i] += 1e-5
        num.append((lp - lm) / 2e-5)
    assert np.abs(num).max() < 1e-8
