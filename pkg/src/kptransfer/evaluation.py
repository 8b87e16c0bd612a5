"""Experiment harnesses: the four-mode ablation, the GT-warp arm and the K sweep.

Every harness trains from a fixed seed, so repeated calls give identical
numbers. Human pretraining is shared by every mode of one seed, and warp
targets are computed once per dataset, so the arms differ only in the way
they warp.
"""

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass

import numpy as np

from .experiment import (
    ALL_MODES,
    MODES,
    ExperimentConfig,
    TransferData,
    compute_matches,
    evaluate_run,
    fit_mode,
    prepare_targets,
    pretrain_keypoints,
)
from .nets import WarpGeometry
from .synthetic import make_samples

log = logging.getLogger(__name__)


@dataclass
class SyntheticSetup:
    n_humans: int = 300
    n_animals: int = 200
    n_train: int = 20
    size: int = 64
    seed: int = 123


def synthetic_transfer_data(setup=None):
    """Rendered human pool plus animal faces split into train and test."""
    setup = setup or SyntheticSetup()
    rng = np.random.default_rng(setup.seed)
    humans = make_samples(setup.n_humans, "human", rng, size=setup.size)
    animals = make_samples(setup.n_animals, "animal", rng, size=setup.size)
    return TransferData(humans, animals[: setup.n_train], animals[setup.n_train :])


def run_modes(data, exp=None, seeds=(0,), modes=MODES, thresh=0.10):
    """``{mode: [EvalResult per seed]}`` on the test split."""
    exp = exp or ExperimentConfig()
    geom = WarpGeometry.from_config(exp.train)
    targets = prepare_targets(data, exp) if "ours" in modes else None
    out = {m: [] for m in modes}
    for seed in seeds:
        pretrained = pretrain_keypoints(data.humans, exp, seed, geom)
        for mode in modes:
            run = fit_mode(mode, data, exp, seed, pretrained, targets, geom)
            res = evaluate_run(run, data.test, data, exp, thresh, geom)
            log.info("seed %d %s: %.4f", seed, mode, res.average_failure)
            out[mode].append(res)
    return out


def median_failure(results):
    return float(np.median([r.average_failure for r in results]))


def run_ablation(data, exp=None, seeds=range(5)):
    """The four transfer modes over several seeds."""
    return run_modes(data, exp, tuple(seeds), MODES)


def run_gt_warp_protocol(data, exp=None, seeds=range(5)):
    """``(ours results, gt-warp results)``, one EvalResult per seed.

    Both arms start from the same human-pretrained keypoint net. The oracle
    arm warps every animal (training and test) with the keypoint-fitted TPS
    towards its pose-matched humans, so it needs test-time ground truth.
    """
    res = run_modes(data, exp, tuple(seeds), ("ours", "gt-warp"))
    return res["ours"], res["gt-warp"]


def run_k_sweep(data, k_values, exp=None, seed=0):
    """``[(k, EvalResult), ...]`` for the full system trained at each K."""
    exp = exp or ExperimentConfig()
    geom = WarpGeometry.from_config(exp.train)
    pretrained = pretrain_keypoints(data.humans, exp, seed, geom)
    out = []
    for k in k_values:
        kexp = dataclasses.replace(exp, train=exp.train.replace(k=int(k)))
        run = fit_mode("ours", data, kexp, seed, pretrained, None, geom)
        out.append((int(k), evaluate_run(run, data.test, data, kexp, geom=geom)))
    return out


def match_counts(data, k_values, exp=None):
    """Number of matched humans per training animal, for each K."""
    exp = exp or ExperimentConfig()
    animal_kps = [s.keypoints for s in data.train]
    human_kps = [s.keypoints for s in data.humans]
    return {
        int(k): {i: len(m.human_indices)
                 for i, m in compute_matches(animal_kps, human_kps, k, exp.colinear_tol).matches.items()}
        for k in k_values
    }


def ksweep_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "avg_failure"])
    for k, r in results:
        w.writerow([k, repr(r.average_failure)])
    return buf.getvalue()


def ablation_csv(results):
    """Long-format table: mode, seed, avg_failure."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "seed", "avg_failure"])
    for mode, rs in results.items():
        for seed, r in enumerate(rs):
            w.writerow([mode, seed, repr(r.average_failure)])
    return buf.getvalue()


__all__ = [
    "ALL_MODES",
    "SyntheticSetup",
    "ablation_csv",
    "ksweep_csv",
    "match_counts",
    "median_failure",
    "run_ablation",
    "run_gt_warp_protocol",
    "run_k_sweep",
    "run_modes",
    "synthetic_transfer_data",
]
