"""Ground-truth warps from matched keypoints, dense flow targets and the warp loss.

Flows live in normalized coordinates on a fixed sample grid. The flow used to
supervise the warp predictor is a *sampling* field: at a point ``q`` of the
warped (human-shaped) frame it holds ``T(q) - q``, where ``T`` maps the warped
frame back into the animal image. That is the direction backward resampling
needs, and it is what :func:`sampling_warp` fits.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateControlPoints,
    GridMismatch,
    InsufficientCorrespondences,
    ParseError,
)
from .pose import DEFAULT_COLINEAR_TOL, is_degenerate
from .tps import apply_tps, fit_tps, sample_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowField:
    sample_points: np.ndarray  # (M, 2)
    offsets: np.ndarray  # (M, 2)

    def __post_init__(self):
        if np.shape(self.sample_points) != np.shape(self.offsets):
            raise GridMismatch("sample_points and offsets differ in shape")


@dataclass(frozen=True)
class WarpTarget:
    """K flow targets for one animal, one per matched human.

    ``gt_transforms[k]`` is the sampling map (human frame -> animal frame)
    behind ``flows[k]``.
    """

    animal_id: str
    flows: list
    gt_transforms: list
    human_ids: tuple = ()

    @property
    def k(self):
        return len(self.flows)

    def offsets(self):
        return np.stack([f.offsets for f in self.flows])


def _correspondences(src_kp, dst_kp, tol):
    both = src_kp.visible & dst_kp.visible
    if both.sum() < 3:
        raise InsufficientCorrespondences(
            f"only {int(both.sum())} mutually visible keypoints, need 3"
        )
    src = src_kp.points[both]
    dst = dst_kp.points[both]
    if is_degenerate(src, tol) or is_degenerate(dst, tol):
        raise DegenerateControlPoints("mutually visible keypoints are near-colinear")
    return src, dst


def gt_warp(animal_kp, human_kp, tol=DEFAULT_COLINEAR_TOL):
    """Exact TPS taking the animal's keypoints onto the human's (mutually visible only)."""
    src, dst = _correspondences(animal_kp, human_kp, tol)
    return fit_tps(src, dst, lam=0.0)


def sampling_warp(animal_kp, human_kp, tol=DEFAULT_COLINEAR_TOL):
    """Exact TPS taking the human's keypoints onto the animal's.

    Resampling the animal image through this map yields an image whose
    keypoints sit at the human's positions.
    """
    return gt_warp(human_kp, animal_kp, tol)


def make_flow_target(t, grid):
    grid = np.asarray(grid, dtype=float)
    return FlowField(grid, apply_tps(t, grid) - grid)


def warp_loss(pred, targets):
    """Mean over targets of the summed squared offset error, and its gradient."""
    if not targets:
        raise ValueError("need at least one target flow")
    for t in targets:
        if not np.array_equal(t.sample_points, pred.sample_points):
            raise GridMismatch("target flow is on a different sample grid")
    diffs = np.stack([pred.offsets - t.offsets for t in targets])
    loss = float(np.sum(diffs**2) / len(targets))
    grad = 2.0 * diffs.sum(axis=0) / len(targets)
    return loss, FlowField(pred.sample_points, grad)


def build_warp_targets(animals, humans, matches, grid_size=20, tol=DEFAULT_COLINEAR_TOL):
    """Flow targets for every animal sample.

    ``matches`` maps an animal's position in ``animals`` to its
    :class:`~kptransfer.pose.MatchSet` (indices into ``humans``). Animals
    without matches, or whose every match is degenerate, get ``None``.
    """
    grid = sample_grid(grid_size)
    out = []
    for i, a in enumerate(animals):
        ms = matches.get(i)
        if ms is None:
            out.append(None)
            continue
        akp = a.normalized_keypoints()
        flows, transforms, hids = [], [], []
        for j, mirrored in zip(ms.human_indices, ms.mirrored):
            hkp = humans[j].normalized_keypoints()
            if mirrored:
                hkp = hkp.flipped(1.0)
            try:
                t = sampling_warp(akp, hkp, tol)
            except (DegenerateControlPoints, InsufficientCorrespondences) as exc:
                log.info("animal %s / human %s skipped: %s",
                         a.provenance.get("id", i), humans[j].provenance.get("id", j), exc)
                continue
            flows.append(make_flow_target(t, grid))
            transforms.append(t)
            hids.append(humans[j].provenance.get("id", str(j)))
        if not flows:
            out.append(None)
            continue
        out.append(WarpTarget(str(a.provenance.get("id", i)), flows, transforms, tuple(hids)))
    return out


_MAGIC = b"KPWT"
_VERSION = 1


def write_warp_targets(path, targets, grid_size, k):
    """Binary cache of flow targets plus a ``.manifest.txt`` listing.

    Little-endian layout: ``b"KPWT"``, then uint32 version, grid size, K and
    the number of animals N; then per animal a uint32 target count ``c <= K``
    followed by ``c * grid_size**2 * 2`` float64 offsets ordered
    (target, sample point row-major with y outer, x/y).
    """
    path = Path(path)
    chunks = [_MAGIC, struct.pack("<4I", _VERSION, grid_size, k, len(targets))]
    lines = []
    for idx, wt in enumerate(targets):
        if wt is None:
            chunks.append(struct.pack("<I", 0))
            lines.append(f"{idx}\t-\t0\t")
            continue
        off = wt.offsets()
        if off.shape[1:] != (grid_size * grid_size, 2):
            raise GridMismatch(f"{wt.animal_id}: flows are not on a {grid_size}x{grid_size} grid")
        chunks.append(struct.pack("<I", wt.k))
        chunks.append(np.ascontiguousarray(off, dtype="<f8").tobytes())
        lines.append(f"{idx}\t{wt.animal_id}\t{wt.k}\t{','.join(wt.human_ids)}")
    path.write_bytes(b"".join(chunks))
    path.with_suffix(".manifest.txt").write_text(
        "index\tanimal_id\tcount\thuman_ids\n" + "\n".join(lines) + "\n"
    )


def read_warp_targets(path):
    """Inverse of :func:`write_warp_targets`: ``(grid_size, k, offsets_per_animal)``.

    Entries of the returned list are ``(c, grid_size**2, 2)`` arrays, or
    ``None`` where no target was stored.
    """
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ParseError(f"{path}: not a warp target cache")
    version, g, k, n = struct.unpack_from("<4I", data, 4)
    if version != _VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    pos = 20
    out = []
    m = g * g
    for _ in range(n):
        (c,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if c == 0:
            out.append(None)
            continue
        count = c * m * 2
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(c, m, 2)
        pos += count * 8
        out.append(arr.copy())
    return g, k, out
