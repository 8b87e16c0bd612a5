"""Training orchestration for the four transfer modes and the GT-warp arm.

Modes:

``ours``
    human-pretrained keypoint net, warp net pretrained on warp supervision,
    then joint finetuning with both losses.
``bl-tps``
    human-pretrained keypoint net plus a warp net driven only by the
    keypoint loss.
``bl-ft``
    human-pretrained keypoint net finetuned on unwarped animals.
``scratch``
    keypoint net from random initialization, no warping.
``gt-warp``
    oracle arm: images warped with ground-truth keypoint-fitted TPS maps, at
    training and at test time.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    DegenerateControlPoints,
    InsufficientCorrespondences,
    InsufficientKeypoints,
    NoCompatibleCandidates,
)
from .metrics import failure_rate
from .nets import (
    KP_PARAMS,
    WARP_FIXED,
    WARP_IDENTITY,
    WARP_PREDICTED,
    Batch,
    TrainConfig,
    WarpGeometry,
    init_params,
    predict,
    train,
)
from .pose import DEFAULT_COLINEAR_TOL, KeypointSet, compute_angle, find_matches, human_candidate
from .supervision import build_warp_targets, sampling_warp
from .tps import TpsTransform, warp_image

log = logging.getLogger(__name__)

MODES = ("ours", "bl-tps", "bl-ft", "scratch")
ALL_MODES = MODES + ("gt-warp",)


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    kp_pretrain_epochs: int = 200
    kp_pretrain_lr: float = 3e-3
    kp_pretrain_milestones: tuple = (100, 150)
    warp_pretrain_epochs: int = 50
    warp_pretrain_milestones: tuple = (25,)
    colinear_tol: float = DEFAULT_COLINEAR_TOL

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["train"] = TrainConfig(**d.get("train", {}))
        for key in ("kp_pretrain_milestones", "warp_pretrain_milestones"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TransferData:
    """Canonical-frame samples: human pool, animal train split, animal test split."""

    humans: list
    train: list
    test: list


@dataclass
class MatchResult:
    matches: dict  # animal position -> MatchSet
    skipped: list  # animal positions without a usable keypoint triple
    pool_sizes: dict  # variant name -> number of eligible humans


def to_batch(samples):
    images = np.stack([s.pixels for s in samples])
    kps = np.stack([s.normalized_keypoints().points for s in samples])
    vis = np.stack([s.keypoints.visible for s in samples])
    return Batch(images, kps, vis)


def human_angles(human_kps, tol=DEFAULT_COLINEAR_TOL):
    return [human_candidate(kp, tol) for kp in human_kps]


def compute_matches(animal_kps, human_kps, k, tol=DEFAULT_COLINEAR_TOL):
    """Pose-matched neighbors for every animal with a visible keypoint triple.

    Raises :class:`NoCompatibleCandidates` naming every animal left without a
    candidate.
    """
    humans = human_angles(human_kps, tol)
    pools = {}
    for h in humans:
        if h is not None:
            pools[h.variant.value] = pools.get(h.variant.value, 0) + 1
    matches, skipped, missing = {}, [], []
    for i, kp in enumerate(animal_kps):
        if kp.n_visible < 3:
            skipped.append(i)
            continue
        try:
            angle = compute_angle(kp)
        except InsufficientKeypoints:
            skipped.append(i)
            continue
        try:
            matches[i] = find_matches(angle, humans, k, animal_index=i)
        except NoCompatibleCandidates:
            missing.append(i)
    if missing:
        raise NoCompatibleCandidates(
            f"{len(missing)} animal(s) have no compatible human candidate", missing
        )
    return MatchResult(matches, skipped, pools)


def target_arrays(targets, k, n_points):
    n = len(targets)
    arr = np.zeros((n, k, n_points, 2))
    mask = np.zeros((n, k), dtype=bool)
    for i, wt in enumerate(targets):
        if wt is None:
            continue
        off = wt.offsets()[:k]
        arr[i, : len(off)] = off
        mask[i, : len(off)] = True
    return arr, mask


def prepare_targets(data, exp, matches=None):
    """Warp targets for the training animals (computed once, shared across seeds)."""
    cfg = exp.train
    if matches is None:
        matches = compute_matches(
            [s.keypoints for s in data.train], [s.keypoints for s in data.humans],
            cfg.k, exp.colinear_tol,
        ).matches
    return build_warp_targets(data.train, data.humans, matches, cfg.sample_grid, exp.colinear_tol)


def pretrain_keypoints(humans, exp, seed, geom=None):
    """Keypoint net trained on unwarped human faces (the 'pretrained human detector')."""
    cfg = exp.train.replace(
        warp_mode=WARP_IDENTITY, w_warp=0.0, w_kp=1.0, epochs=exp.kp_pretrain_epochs,
        lr_kp=exp.kp_pretrain_lr, milestones=exp.kp_pretrain_milestones, seed=seed + 1000,
    )
    params = init_params(cfg, np.random.default_rng(seed))
    params, _ = train(cfg, to_batch(humans), params, geom)
    return params


def _with_kp(params, pretrained):
    out = params.copy()
    if pretrained is not None:
        for n in KP_PARAMS:
            setattr(out, n, getattr(pretrained, n).copy())
    return out


@dataclass
class ModeRun:
    mode: str
    params: object
    cfg: TrainConfig
    curves: list
    warp_curves: list = field(default_factory=list)


def mode_config(mode, cfg):
    if mode == "ours":
        return cfg.replace(warp_mode=WARP_PREDICTED)
    if mode == "bl-tps":
        return cfg.replace(warp_mode=WARP_PREDICTED, w_warp=0.0)
    if mode in ("bl-ft", "scratch"):
        return cfg.replace(warp_mode=WARP_IDENTITY, w_warp=0.0)
    if mode == "gt-warp":
        return cfg.replace(warp_mode=WARP_FIXED, w_warp=0.0)
    raise ValueError(f"unknown mode {mode!r}")


def gt_sampling_warps(animals, humans, exp, matches=None, k=1):
    """Ground-truth sampling maps to the ``k`` nearest pose-matched humans.

    Returns one list per animal (nearest first); degenerate correspondences
    are skipped and animals without any usable match get an empty list.
    """
    if matches is None:
        matches = compute_matches(
            [s.keypoints for s in animals], [s.keypoints for s in humans], k, exp.colinear_tol
        ).matches
    out = []
    for i, a in enumerate(animals):
        ms = matches.get(i)
        ts = []
        if ms is not None:
            for j, mirrored in zip(ms.human_indices[:k], ms.mirrored[:k]):
                hkp = humans[j].normalized_keypoints()
                if mirrored:
                    hkp = hkp.flipped(1.0)
                try:
                    ts.append(sampling_warp(a.normalized_keypoints(), hkp, exp.colinear_tol))
                except (DegenerateControlPoints, InsufficientCorrespondences) as exc:
                    log.info("gt warp for %s skipped a match: %s", a.provenance.get("id"), exc)
        out.append(ts)
    return out


def fixed_warp_batch(samples, transforms):
    """Batch of samples pre-warped by per-sample sampling maps.

    ``transforms[i]`` is a list of maps for sample ``i``; each map yields one
    batch element, and samples with an empty list are warped by the identity.
    """
    picked, ts = [], []
    for s, tl in zip(samples, transforms):
        for t in tl or [TpsTransform.identity()]:
            picked.append(s)
            ts.append(t)
    batch = to_batch(picked)
    batch.warped = np.stack([warp_image(s.pixels, t) for s, t in zip(picked, ts)])
    batch.transforms = ts
    return batch


def fit_mode(mode, data, exp, seed, pretrained=None, targets=None, geom=None):
    """Train one mode from scratch or from a human-pretrained keypoint net."""
    base = exp.train.replace(seed=seed)
    cfg = mode_config(mode, base)
    geom = geom or WarpGeometry.from_config(cfg)
    params = init_params(cfg, np.random.default_rng(seed))
    if mode != "scratch":
        if pretrained is None:
            pretrained = pretrain_keypoints(data.humans, exp, seed, geom)
        params = _with_kp(params, pretrained)
    if mode == "gt-warp":
        warps = gt_sampling_warps(data.train, data.humans, exp, k=cfg.k)
        batch = fixed_warp_batch(data.train, warps)
    else:
        batch = to_batch(data.train)
    warp_curves = []
    if mode == "ours":
        if targets is None:
            targets = prepare_targets(data, exp)
        batch.targets, batch.target_mask = target_arrays(targets, cfg.k, cfg.sample_grid**2)
        if exp.warp_pretrain_epochs:
            wcfg = cfg.replace(w_kp=0.0, epochs=exp.warp_pretrain_epochs,
                               milestones=exp.warp_pretrain_milestones, seed=seed + 2000)
            params, warp_curves = train(wcfg, batch, params, geom)
    params, curves = train(cfg, batch, params, geom)
    return ModeRun(mode, params, cfg, curves, warp_curves)


def predict_samples(run, samples, data=None, exp=None, geom=None):
    """Keypoints in each sample's source-image pixel frame, ``(N, 5, 2)``."""
    images = np.stack([s.pixels for s in samples])
    if run.mode == "gt-warp":
        ts = gt_sampling_warps(samples, data.humans, exp, k=1)
        fb = fixed_warp_batch(samples, ts)
        k, _ = predict(run.params, images, run.cfg, geom, fb.transforms, fb.warped)
    else:
        k, _ = predict(run.params, images, run.cfg, geom)
    return np.stack([s.to_original(k[i] * s.size) for i, s in enumerate(samples)])


def original_keypoints(samples):
    return [KeypointSet(s.to_original(s.keypoints.points), s.keypoints.visible) for s in samples]


def evaluate_run(run, samples, data=None, exp=None, thresh=0.10, geom=None):
    preds = predict_samples(run, samples, data, exp, geom)
    return failure_rate(preds, original_keypoints(samples), [s.bbox_size for s in samples], thresh)
