"""Central finite differences for the full model, skipping kinks.

The bilinear sampler is piecewise linear in its coordinates, so the loss is
only piecewise smooth in the warp parameters. A parameter is checked only if
perturbing it by +-eps leaves every sampling coordinate in the same pixel cell
and every keypoint residual on the same side of the smooth-L1 knee.
"""

import numpy as np

from kptransfer.nets import (
    WARP_PREDICTED,
    Batch,
    ModelParams,
    TrainConfig,
    WarpGeometry,
    featurize,
    forward_backward,
    init_params,
)
from kptransfer.synthetic import make_samples

SMALL = dict(size=16, feature_size=8, grid=5, sample_grid=6, hidden_warp=6, hidden_kp=7, k=3)


def sampling_cells(p, batch, geom, cfg):
    if cfg.warp_mode != WARP_PREDICTED or cfg.w_kp == 0:
        return None
    x = featurize(batch.images, cfg.feature_size)
    d = (np.tanh(x @ p.W1.T + p.b1) @ p.W2.T + p.b2).reshape(len(batch), -1, 2)
    P = geom.pixels[None] + geom.B_pix @ (d - geom.control)
    return np.floor(P * geom.size - 0.5)


def knee_side(p, batch, geom, cfg):
    if cfg.w_kp == 0:
        return None
    m, _ = forward_backward(p, batch, geom, cfg, need_grad=False)
    return np.abs(m["keypoints"] - batch.keypoints) < 1.0


def smooth_images(n, size, rng):
    return np.stack([s.pixels for s in make_samples(n, "animal", rng, size=size)])


def random_problem(seed, n=2, **overrides):
    """Batch and non-degenerate random parameters for a small model."""
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(**{**SMALL, **overrides})
    geom = WarpGeometry.from_config(cfg)
    imgs = smooth_images(n, cfg.size, rng)
    kps = rng.uniform(0.2, 0.8, (n, 5, 2))
    vis = rng.random((n, 5)) > 0.3
    m = cfg.sample_grid**2
    targets = rng.normal(0, 0.03, (n, cfg.k, m, 2))
    mask = rng.random((n, cfg.k)) > 0.3
    mask[:, 0] = True
    batch = Batch(imgs, kps, vis, targets, mask)
    p = init_params(cfg, rng)
    p.b1 = rng.normal(0, 0.3, p.b1.shape)
    p.W2 = rng.normal(0, 0.03, p.W2.shape)
    p.b2 = p.b2 + rng.normal(0, 0.01, p.b2.shape)
    p.c1 = rng.normal(0, 0.3, p.c1.shape)
    p.V2 = rng.normal(0, 0.3, p.V2.shape)
    return p, batch, geom, cfg


def finite_difference_check(p, batch, geom, cfg, eps=1e-5):
    """``(relative error, n_checked, n_total)`` over the non-excluded parameters."""
    _, g = forward_backward(p, batch, geom, cfg)
    v = p.flat()
    an = g.flat()
    cells = sampling_cells(p, batch, geom, cfg)
    side = knee_side(p, batch, geom, cfg)
    fd = np.zeros_like(v)
    keep = np.zeros(len(v), dtype=bool)
    for i in range(len(v)):
        vals = []
        ok = True
        for sgn in (1.0, -1.0):
            w = v.copy()
            w[i] += sgn * eps
            q = ModelParams.from_flat(p, w)
            if cells is not None and not np.array_equal(sampling_cells(q, batch, geom, cfg), cells):
                ok = False
                break
            m, _ = forward_backward(q, batch, geom, cfg, need_grad=False)
            if side is not None and not np.array_equal(np.abs(m["keypoints"] - batch.keypoints) < 1.0,
                                                       side):
                ok = False
                break
            vals.append(m["loss"])
        if ok:
            keep[i] = True
            fd[i] = (vals[0] - vals[1]) / (2 * eps)
    num = np.linalg.norm(fd[keep] - an[keep])
    den = max(np.linalg.norm(fd[keep]), np.linalg.norm(an[keep]), 1e-300)
    return num / den, int(keep.sum()), len(v)
