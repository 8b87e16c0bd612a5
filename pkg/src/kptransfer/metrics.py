"""Failure-rate metric, threshold sweeps and warp-back keypoint transfer."""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch
from .pose import KEYPOINT_NAMES
from .tps import apply_tps, invert_tps

DEFAULT_THRESHOLD = 0.10


@dataclass(frozen=True)
class EvalResult:
    per_keypoint_failure: tuple
    average_failure: float
    evaluated: tuple
    failed: tuple

    def to_dict(self):
        return {
            "average_failure": self.average_failure,
            "per_keypoint": {
                name: {"failure": f, "evaluated": e, "failed": k}
                for name, f, e, k in zip(KEYPOINT_NAMES, self.per_keypoint_failure,
                                         self.evaluated, self.failed)
            },
        }


def _normalized_errors(preds, gts, bbox_sizes):
    """Distance / face size per keypoint, ``(N, 5)``, and the annotated mask."""
    preds = np.asarray(preds, dtype=float)
    if preds.ndim == 2:
        preds = preds.reshape(len(preds), 5, 2)
    sizes = np.asarray(bbox_sizes, dtype=float)
    if not (len(preds) == len(gts) == len(sizes)):
        raise LengthMismatch(
            f"{len(preds)} predictions, {len(gts)} ground truths, {len(sizes)} sizes"
        )
    if np.any(sizes <= 0):
        raise ValueError("bbox sizes must be positive")
    if len(gts) == 0:
        return np.zeros((0, 5)), np.zeros((0, 5), dtype=bool)
    gt_pts = np.stack([g.points for g in gts])
    mask = np.stack([g.visible for g in gts])
    dist = np.linalg.norm(preds - gt_pts, axis=-1)
    return dist / sizes[:, None], mask


def _result(fail, mask):
    evaluated = mask.sum(axis=0)
    failed = (fail & mask).sum(axis=0)
    per = tuple(float(f / e) if e else 0.0 for f, e in zip(failed, evaluated))
    total = int(evaluated.sum())
    avg = float(failed.sum() / total) if total else 0.0
    return EvalResult(per, avg, tuple(int(e) for e in evaluated), tuple(int(f) for f in failed))


def failure_rate(preds, gts, bbox_sizes, thresh=DEFAULT_THRESHOLD):
    """A keypoint fails when it lies more than ``thresh * bbox_size`` from ground truth.

    Only annotated (visible) ground-truth keypoints are counted.
    """
    ratio, mask = _normalized_errors(preds, gts, bbox_sizes)
    return _result(ratio > thresh, mask)


def threshold_sweep(preds, gts, bbox_sizes, thresholds):
    """``[(threshold, average_failure), ...]`` over ascending thresholds."""
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    ratio, mask = _normalized_errors(preds, gts, bbox_sizes)
    return [(t, _result(ratio > t, mask).average_failure) for t in thresholds]


def curve_csv(curve):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "failure"])
    for t, f in curve:
        w.writerow([repr(t), repr(f)])
    return buf.getvalue()


def eval_json(result, extra=None):
    doc = result.to_dict()
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def transfer_back(pred_kps, t, probe_grid=None):
    """Map keypoints predicted in the warped frame back to the original image.

    ``t`` is the forward (original -> warped) transform; predictions go
    through its swap-and-refit inverse.
    """
    pts = np.asarray(pred_kps, dtype=float).reshape(-1, 2)
    return apply_tps(invert_tps(t, probe_grid), pts)
