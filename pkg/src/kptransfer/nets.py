"""Toy warp predictor and keypoint regressor with hand-written backprop.

Both networks are one-hidden-layer tanh MLPs over block-averaged image
features. The warp net outputs the positions of a ``G x G`` TPS control grid;
the TPS they define is a sampling map from the warped frame into the input
image, so the warped image is ``img(T(q))`` and a keypoint ``k`` predicted on
the warped image corresponds to ``T(k)`` in the input. Keypoint losses are
measured after that mapping, which keeps every step differentiable without
inverting a TPS.
"""

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradient
from .tps import (
    apply_tps,
    basis_with_grad,
    bilinear_sample,
    control_grid,
    pixel_centers,
    sample_grid,
    tps_flow_basis,
    tps_jacobian,
    tps_system,
)

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "V1", "c1", "V2", "c2")
WARP_PARAMS = ("W1", "b1", "W2", "b2")
KP_PARAMS = ("V1", "c1", "V2", "c2")

WARP_PREDICTED = "predicted"
WARP_IDENTITY = "identity"
WARP_FIXED = "fixed"


@dataclass
class TrainConfig:
    lr_warp: float = 1e-3
    lr_kp: float = 3e-3
    epochs: int = 150
    milestones: tuple = (50, 100)
    k: int = 5
    grid: int = 5
    sample_grid: int = 20
    seed: int = 0
    w_warp: float = 1.0
    w_kp: float = 1.0
    batch_size: int = 16
    size: int = 64
    feature_size: int = 16
    hidden_warp: int = 32
    hidden_kp: int = 64
    warp_mode: str = WARP_PREDICTED
    lam: float = 0.0

    def __post_init__(self):
        if self.lr_warp <= 0 or self.lr_kp <= 0:
            raise ValueError("learning rates must be positive")
        if self.w_warp < 0 or self.w_kp < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.size % self.feature_size:
            raise ValueError("size must be a multiple of feature_size")
        if self.warp_mode not in (WARP_PREDICTED, WARP_IDENTITY, WARP_FIXED):
            raise ValueError(f"unknown warp_mode {self.warp_mode!r}")
        self.milestones = tuple(self.milestones)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class ModelParams:
    """Weights of both subnetworks. Gradients use the same container."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    V1: np.ndarray
    c1: np.ndarray
    V2: np.ndarray
    c2: np.ndarray

    def arrays(self):
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self):
        return ModelParams(**{n: a.copy() for n, a in self.arrays().items()})

    def zeros_like(self):
        return ModelParams(**{n: np.zeros_like(a) for n, a in self.arrays().items()})

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    @classmethod
    def from_flat(cls, like, vec):
        out = {}
        pos = 0
        for n, a in like.arrays().items():
            out[n] = vec[pos: pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return cls(**out)

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())


def init_params(cfg, rng, kp_scale=1.0):
    """Warp net starts at the identity warp (zero output layer, bias = control grid)."""
    D = cfg.feature_size**2
    G2 = cfg.grid**2
    ctrl = control_grid(cfg.grid)
    return ModelParams(
        W1=rng.normal(0.0, 1.0 / np.sqrt(D), (cfg.hidden_warp, D)),
        b1=np.zeros(cfg.hidden_warp),
        W2=np.zeros((2 * G2, cfg.hidden_warp)),
        b2=ctrl.ravel().copy(),
        V1=rng.normal(0.0, kp_scale / np.sqrt(D), (cfg.hidden_kp, D)),
        c1=np.zeros(cfg.hidden_kp),
        V2=rng.normal(0.0, 0.1 * kp_scale / np.sqrt(cfg.hidden_kp), (10, cfg.hidden_kp)),
        c2=np.full(10, 0.5),
    )


def featurize(pixels, feature_size=16):
    """Block-average to ``feature_size^2`` values and subtract each image's mean.

    Accepts one ``(S, S)`` raster or a ``(N, S, S)`` stack.
    """
    pixels = np.asarray(pixels, dtype=float)
    single = pixels.ndim == 2
    if single:
        pixels = pixels[None]
    n, S, _ = pixels.shape
    b = S // feature_size
    blocks = pixels.reshape(n, feature_size, b, feature_size, b).mean(axis=(2, 4))
    f = blocks.reshape(n, -1)
    # Shifting by the first entry first makes constant images exactly zero.
    f = f - f[:, :1]
    f = f - f.mean(axis=1, keepdims=True)
    return f[0] if single else f


def featurize_adjoint(grad, size, feature_size=16):
    """Pull a feature-space gradient back to pixels (transpose of :func:`featurize`)."""
    grad = grad - grad.mean(axis=1, keepdims=True)
    b = size // feature_size
    g = grad.reshape(-1, feature_size, 1, feature_size, 1) / (b * b)
    g = np.broadcast_to(g, (grad.shape[0], feature_size, b, feature_size, b))
    return g.reshape(-1, size, size)


def warp_net_forward(p, x):
    """Control-point positions ``W2 tanh(W1 x + b1) + b2``; ``x`` is ``(D,)`` or ``(N, D)``."""
    return np.tanh(x @ p.W1.T + p.b1) @ p.W2.T + p.b2


def kp_net_forward(p, x):
    """Five keypoints as ``(x, y)`` pairs in normalized coordinates, flattened to 10."""
    return np.tanh(x @ p.V1.T + p.c1) @ p.V2.T + p.c2


def smooth_l1(x):
    """Huber loss with unit knee: ``(value, derivative)``, elementwise."""
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    small = a < 1.0
    value = np.where(small, 0.5 * x * x, a - 0.5)
    deriv = np.where(small, x, np.sign(x))
    return value, deriv


def keypoint_loss(pred, gt):
    """Smooth-L1 over visible keypoints; ``pred`` is 10 reals, ``gt`` a KeypointSet.

    Invisible keypoints contribute nothing to the loss or gradient.
    """
    pred = np.asarray(pred, dtype=float).reshape(5, 2)
    mask = gt.visible[:, None].astype(float)
    resid = np.where(mask > 0, pred - gt.points, 0.0)
    v, d = smooth_l1(resid)
    return float(np.sum(v * mask)), (d * mask).ravel()


class WarpGeometry:
    """Precomputed TPS bases for a control grid, pixel grid and flow sample grid."""

    def __init__(self, size, grid, sample_grid_size, lam=0.0):
        self.size = size
        self.control = control_grid(grid)
        self.pixels = pixel_centers(size, size)
        self.samples = sample_grid(sample_grid_size)
        self.system = tps_system(self.control, lam)
        self.B_pix = tps_flow_basis(self.control, self.pixels, lam)
        self.B_samp = tps_flow_basis(self.control, self.samples, lam)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.size, cfg.grid, cfg.sample_grid, cfg.lam)

    def basis_at(self, pts):
        return basis_with_grad(self.control, self.system, pts)


@dataclass
class Batch:
    """Arrays for one training step.

    ``keypoints`` are ``(N, 5, 2)`` normalized coordinates of the input images
    and ``visible`` ``(N, 5)``. ``targets`` is ``(N, K, M, 2)`` with
    ``target_mask`` ``(N, K)``; rows without targets are all-False. For fixed
    warps ``warped`` holds the pre-warped images and ``transforms`` the TPS
    sampling maps that produced them.
    """

    images: np.ndarray
    keypoints: np.ndarray
    visible: np.ndarray
    targets: np.ndarray = None
    target_mask: np.ndarray = None
    warped: np.ndarray = None
    transforms: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return Batch(
            self.images[idx], self.keypoints[idx], self.visible[idx],
            pick(self.targets), pick(self.target_mask), pick(self.warped),
            [self.transforms[i] for i in idx] if self.transforms else [],
        )


def _warp_losses(flow, targets, mask):
    """Per-element mean-over-targets squared flow error and d/dflow."""
    n_t = mask.sum(axis=1)
    has = n_t > 0
    safe = np.where(has, n_t, 1.0)
    diff = (flow[:, None] - targets) * mask[:, :, None, None]
    loss = np.sum(diff * diff, axis=(1, 2, 3)) / safe
    grad = 2.0 * diff.sum(axis=1) / safe[:, None, None]
    return np.where(has, loss, 0.0), grad


def forward_backward(p, batch, geom, cfg, need_grad=True):
    """Total loss ``w_warp * L_warp + w_kp * L_kp`` over the batch and its gradient.

    Returns ``(metrics, grads)``; ``grads`` is a :class:`ModelParams` of summed
    per-element gradients (``None`` without ``need_grad``).
    """
    N = len(batch)
    S = geom.size
    fs = cfg.feature_size
    mode = cfg.warp_mode
    imgs = batch.images
    g = p.zeros_like() if need_grad else None
    metrics = {"warp_loss": 0.0, "kp_loss": 0.0}
    use_kp = cfg.w_kp > 0
    ctrl = geom.control

    if mode == WARP_PREDICTED:
        x = featurize(imgs, fs)
        h = np.tanh(x @ p.W1.T + p.b1)
        d = (h @ p.W2.T + p.b2).reshape(N, -1, 2)
        delta = d - ctrl
        g_delta = np.zeros_like(delta)
        if batch.targets is not None and cfg.w_warp > 0:
            flow = geom.B_samp @ delta
            wl, wg = _warp_losses(flow, batch.targets, batch.target_mask)
            metrics["warp_loss"] = float(wl.sum())
            g_delta += cfg.w_warp * (geom.B_samp.T @ wg)

    if use_kp:
        if mode == WARP_PREDICTED:
            P = geom.pixels[None] + geom.B_pix @ delta
            warped, gx, gy = bilinear_sample(
                imgs, P[..., 0] * S - 0.5, P[..., 1] * S - 0.5, with_grad=True
            )
            warped = warped.reshape(N, S, S)
        elif mode == WARP_FIXED:
            warped = batch.warped
        else:
            warped = imgs
        xw = featurize(warped, fs)
        h2 = np.tanh(xw @ p.V1.T + p.c1)
        k = (h2 @ p.V2.T + p.c2).reshape(N, 5, 2)

        if mode == WARP_PREDICTED:
            B, dBx, dBy = geom.basis_at(k.reshape(-1, 2))
            B = B.reshape(N, 5, -1)
            dBx = dBx.reshape(N, 5, -1)
            dBy = dBy.reshape(N, 5, -1)
            k_o = k + B @ delta
            # J[n, p, i, j] = d k_o[i] / d k[j]
            J = np.empty((N, 5, 2, 2))
            J[..., :, 0] = dBx @ delta
            J[..., :, 1] = dBy @ delta
            J += np.eye(2)
        elif mode == WARP_FIXED:
            k_o = np.stack([apply_tps(t, k[i]) for i, t in enumerate(batch.transforms)])
            J = np.stack([tps_jacobian(t, k[i]) for i, t in enumerate(batch.transforms)])
        else:
            k_o = k
            J = None

        mask = batch.visible[:, :, None].astype(float)
        resid = np.where(mask > 0, k_o - batch.keypoints, 0.0)
        v, dv = smooth_l1(resid)
        metrics["kp_loss"] = float(np.sum(v * mask))
        metrics["keypoints"] = k_o

        if need_grad:
            g_o = cfg.w_kp * dv * mask
            g_k = g_o if J is None else np.einsum("npi,npij->npj", g_o, J)
            gk = g_k.reshape(N, 10)
            g.c2 = gk.sum(axis=0)
            g.V2 = gk.T @ h2
            dz2 = (gk @ p.V2) * (1.0 - h2 * h2)
            g.V1 = dz2.T @ xw
            g.c1 = dz2.sum(axis=0)
            if mode == WARP_PREDICTED:
                g_delta += B.transpose(0, 2, 1) @ g_o
                dpix = featurize_adjoint(dz2 @ p.V1, S, fs).reshape(N, S * S)
                dP = np.stack([dpix * gx * S, dpix * gy * S], axis=-1)
                g_delta += geom.B_pix.T @ dP

    if mode == WARP_PREDICTED and need_grad:
        dd = g_delta.reshape(N, -1)
        g.b2 = dd.sum(axis=0)
        g.W2 = dd.T @ h
        dz1 = (dd @ p.W2) * (1.0 - h * h)
        g.W1 = dz1.T @ x
        g.b1 = dz1.sum(axis=0)
    if mode == WARP_PREDICTED:
        metrics["controls"] = d
    metrics["loss"] = cfg.w_warp * metrics["warp_loss"] + cfg.w_kp * metrics["kp_loss"]
    return metrics, g


def _check_finite(g, metrics):
    bad = [n for n, a in g.arrays().items() if not np.all(np.isfinite(a))]
    if bad or not np.isfinite(metrics["loss"]):
        raise NonFiniteGradient(
            f"non-finite gradient in {bad or ['loss']}",
            {"arrays": bad, "warp_loss": metrics["warp_loss"], "kp_loss": metrics["kp_loss"]},
        )


def joint_step(p, batch, cfg, geom=None, lr_scale=1.0):
    """One accumulated-gradient update of both subnetworks.

    Gradients of every batch element are summed, then each subnetwork takes a
    plain gradient step at its own learning rate. Returns
    ``(new_params, metrics)``.
    """
    geom = geom or WarpGeometry.from_config(cfg)
    metrics, g = forward_backward(p, batch, geom, cfg)
    _check_finite(g, metrics)
    out = p.copy()
    for n in WARP_PARAMS:
        setattr(out, n, getattr(p, n) - lr_scale * cfg.lr_warp * getattr(g, n))
    for n in KP_PARAMS:
        setattr(out, n, getattr(p, n) - lr_scale * cfg.lr_kp * getattr(g, n))
    metrics["grads"] = g
    return out, metrics


def lr_scale_at(epoch, milestones):
    return 0.1 ** sum(epoch >= m for m in milestones)


def train(cfg, batch, params=None, geom=None, log_every=0):
    """Minibatch gradient descent over ``cfg.epochs`` epochs.

    Deterministic given ``cfg.seed``. Returns ``(params, curves)`` where
    ``curves`` has one ``(epoch, warp_loss, kp_loss)`` row per epoch, losses
    summed over the epoch's steps.
    """
    if len(batch) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    geom = geom or WarpGeometry.from_config(cfg)
    p = params.copy() if params is not None else init_params(cfg, rng)
    curves = []
    n = len(batch)
    for epoch in range(cfg.epochs):
        scale = lr_scale_at(epoch, cfg.milestones)
        order = rng.permutation(n)
        wl = kl = 0.0
        for start in range(0, n, cfg.batch_size):
            sub = batch.subset(order[start: start + cfg.batch_size])
            p, m = joint_step(p, sub, cfg, geom, scale)
            wl += m["warp_loss"]
            kl += m["kp_loss"]
        curves.append((epoch, wl, kl))
        if log_every and epoch % log_every == 0:
            log.info("epoch %d warp %.5f kp %.5f", epoch, wl, kl)
    return p, curves


def predict(p, images, cfg, geom=None, transforms=None, warped=None):
    """Keypoints ``(N, 5, 2)`` in the input images' normalized frame.

    For predicted warps also returns the control positions used; for fixed
    warps, ``transforms`` and ``warped`` must be supplied.
    """
    geom = geom or WarpGeometry.from_config(cfg)
    n = len(images)
    dummy = Batch(images, np.zeros((n, 5, 2)), np.zeros((n, 5), dtype=bool),
                  warped=warped, transforms=transforms or [])
    m, _ = forward_backward(p, dummy, geom, cfg.replace(w_kp=1.0, w_warp=0.0), need_grad=False)
    return m["keypoints"], m.get("controls")
