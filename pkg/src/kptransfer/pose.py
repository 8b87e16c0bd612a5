"""Keypoint-based pose angles and pose-matched human neighbor retrieval."""

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientKeypoints, NoCompatibleCandidates

KEYPOINT_NAMES = ("left_eye", "right_eye", "nose", "left_mouth", "right_mouth")
LEFT_EYE, RIGHT_EYE, NOSE, LEFT_MOUTH, RIGHT_MOUTH = range(5)
# Index permutation applied by a horizontal mirror.
FLIP_PERMUTATION = (RIGHT_EYE, LEFT_EYE, NOSE, RIGHT_MOUTH, LEFT_MOUTH)

DEFAULT_COLINEAR_TOL = 0.02


@dataclass(frozen=True)
class KeypointSet:
    """Five named facial keypoints with visibility flags.

    ``points`` is ``(5, 2)`` in :data:`KEYPOINT_NAMES` order. Coordinates of
    invisible keypoints carry no meaning.
    """

    points: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(5, 2)
        vis = np.array(self.visible, dtype=bool).reshape(5)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visible", vis)

    @property
    def n_visible(self):
        return int(self.visible.sum())

    def transformed(self, scale=1.0, offset=(0.0, 0.0)):
        """Copy with ``points * scale + offset`` (``scale`` may be per-axis)."""
        return KeypointSet(self.points * np.asarray(scale) + np.asarray(offset), self.visible)

    def flipped(self, width):
        """Mirror about ``x = width / 2``, swapping left and right labels."""
        perm = list(FLIP_PERMUTATION)
        pts = self.points[perm].copy()
        pts[:, 0] = width - pts[:, 0]
        return KeypointSet(pts, self.visible[perm])

    def rotated(self, degrees, center=(0.0, 0.0)):
        """Rotate by ``R = [[cos, -sin], [sin, cos]]`` about ``center``."""
        a = math.radians(degrees)
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        c = np.asarray(center, dtype=float)
        return KeypointSet((self.points - c) @ R.T + c, self.visible)


class PoseVariant(enum.Enum):
    FRONTAL = "frontal"
    LEFT_PROFILE = "left_profile"
    RIGHT_PROFILE = "right_profile"

    def mirrored(self):
        return _MIRROR[self]


_MIRROR = {
    PoseVariant.FRONTAL: PoseVariant.FRONTAL,
    PoseVariant.LEFT_PROFILE: PoseVariant.RIGHT_PROFILE,
    PoseVariant.RIGHT_PROFILE: PoseVariant.LEFT_PROFILE,
}

VARIANT_TRIPLES = {
    PoseVariant.FRONTAL: (LEFT_EYE, RIGHT_EYE, NOSE),
    PoseVariant.LEFT_PROFILE: (LEFT_EYE, NOSE, LEFT_MOUTH),
    PoseVariant.RIGHT_PROFILE: (RIGHT_EYE, NOSE, RIGHT_MOUTH),
}


@dataclass(frozen=True)
class PoseAngle:
    variant: PoseVariant
    degrees: float


@dataclass(frozen=True)
class MatchSet:
    """The ``k`` pose-nearest humans of one animal, nearest first.

    ``mirrored[i]`` marks a human admitted through its horizontal mirror.
    """

    animal_index: int
    human_indices: list
    angle_diffs: list
    mirrored: list = field(default_factory=list)

    def __post_init__(self):
        if not self.mirrored:
            object.__setattr__(self, "mirrored", [False] * len(self.human_indices))


def pose_variant(kp):
    """Variant whose keypoint triple is visible, frontal first; ``None`` if none is."""
    vis = kp.visible
    for variant in (PoseVariant.FRONTAL, PoseVariant.LEFT_PROFILE, PoseVariant.RIGHT_PROFILE):
        if all(vis[i] for i in VARIANT_TRIPLES[variant]):
            return variant
    return None


def _interior_angle(apex, a, b):
    u = a - apex
    v = b - apex
    cross = u[0] * v[1] - u[1] * v[0]
    dot = u[0] * v[0] + u[1] * v[1]
    return math.degrees(math.atan2(abs(cross), dot))


def compute_angle(kp):
    """Angle-of-interest used to compare poses.

    Frontal faces (both eyes and nose visible) measure the angle between the
    downward vertical at the eye midpoint and the ray from that midpoint to
    the nose, positive when the nose lies toward +x. Profile faces measure the
    interior angle at the nose between the visible-side eye and mouth corner.
    """
    variant = pose_variant(kp)
    p = kp.points
    if variant is PoseVariant.FRONTAL:
        center = (p[LEFT_EYE] + p[RIGHT_EYE]) / 2
        ray = p[NOSE] - center
        deg = math.degrees(math.atan2(ray[0], ray[1]))
        return PoseAngle(variant, 180.0 if deg == -180.0 else deg)
    if variant is PoseVariant.LEFT_PROFILE:
        return PoseAngle(variant, _interior_angle(p[NOSE], p[LEFT_EYE], p[LEFT_MOUTH]))
    if variant is PoseVariant.RIGHT_PROFILE:
        return PoseAngle(variant, _interior_angle(p[NOSE], p[RIGHT_EYE], p[RIGHT_MOUTH]))
    raise InsufficientKeypoints(
        f"no visible keypoint triple among {[n for n, v in zip(KEYPOINT_NAMES, kp.visible) if v]}"
    )


def thinness(pts):
    """Twice the triangle area over the squared longest side (0 for a line)."""
    a, b, c = (np.asarray(q, dtype=float) for q in pts)
    u = b - a
    v = c - a
    area2 = abs(u[0] * v[1] - u[1] * v[0])
    longest = max(float(np.dot(u, u)), float(np.dot(v, v)), float(np.dot(c - b, c - b)))
    if longest == 0.0:
        return 0.0
    return area2 / longest


def is_colinear(pts, tol=DEFAULT_COLINEAR_TOL):
    return thinness(pts) < tol


def is_degenerate(points, tol=DEFAULT_COLINEAR_TOL):
    """True when every triple of ``points`` is near-colinear (or fewer than 3)."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                if not is_colinear(points[[i, j, k]], tol):
                    return False
    return True


def human_candidate(kp, tol=DEFAULT_COLINEAR_TOL):
    """PoseAngle of a human eligible for matching, or ``None`` if filtered.

    A human is dropped when no triple is visible or when the triple defining
    its pose is near-colinear.
    """
    variant = pose_variant(kp)
    if variant is None:
        return None
    if is_colinear(kp.points[list(VARIANT_TRIPLES[variant])], tol):
        return None
    return compute_angle(kp)


def find_matches(animal, humans, k, animal_index=0):
    """The ``k`` humans whose angle is closest to ``animal``'s.

    ``humans`` holds a :class:`PoseAngle` per human, or ``None`` for humans
    excluded from matching. Candidates share the animal's variant; humans of
    the opposite profile are admitted through their mirror image, which keeps
    the interior angle. Ties go to the lower human index.
    """
    cands = []
    for j, h in enumerate(humans):
        if h is None:
            continue
        if h.variant is animal.variant:
            cands.append((abs(animal.degrees - h.degrees), j, False))
        elif animal.variant is not PoseVariant.FRONTAL and h.variant is animal.variant.mirrored():
            cands.append((abs(animal.degrees - h.degrees), j, True))
    if not cands:
        raise NoCompatibleCandidates(
            f"no {animal.variant.value} human candidates for animal {animal_index}",
            [animal_index],
        )
    cands.sort(key=lambda c: (c[0], c[1]))
    top = cands[:k]
    return MatchSet(
        animal_index=animal_index,
        human_indices=[c[1] for c in top],
        angle_diffs=[c[0] for c in top],
        mirrored=[c[2] for c in top],
    )
