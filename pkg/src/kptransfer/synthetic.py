"""Synthetic faces: a procedurally drawn template warped onto sampled keypoints.

Every face is the same analytic template seen through a TPS that carries the
template's five keypoints onto the face's keypoints. Humans keep the template
layout up to a similarity and small jitter; animals use a wider-eyed,
long-snouted layout, so they differ from humans by a TPS distortion.
"""

import math

import numpy as np

from .data import FaceAnnotation, Species, crop_and_resize
from .pose import KeypointSet
from .tps import apply_tps, fit_tps

TEMPLATE_KEYPOINTS = np.array(
    [[0.34, 0.38], [0.66, 0.38], [0.50, 0.58], [0.38, 0.75], [0.62, 0.75]]
)
ANIMAL_KEYPOINTS = np.array(
    [[0.20, 0.28], [0.80, 0.28], [0.50, 0.72], [0.40, 0.86], [0.60, 0.86]]
)
POSE_CENTER = np.array([0.5, 0.55])


def _blob(u, c, sigma):
    d2 = ((u - c) ** 2).sum(-1)
    return np.exp(-d2 / (2 * sigma * sigma))


def _segment(u, a, b, sigma):
    ab = b - a
    t = np.clip(((u - a) @ ab) / (ab @ ab), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return _blob(u, closest, sigma)


def template_intensity(u):
    """Template brightness at template coordinates ``u`` (``(..., 2)``)."""
    le, re, nose, lm, rm = TEMPLATE_KEYPOINTS
    rx = (u[..., 0] - 0.5) / 0.42
    ry = (u[..., 1] - 0.56) / 0.50
    face = 1.0 / (1.0 + np.exp((np.sqrt(rx * rx + ry * ry) - 1.0) * 12.0))
    v = 0.04 + 0.60 * face + 0.08 * face * u[..., 1]
    v -= 0.45 * (_blob(u, le, 0.05) + _blob(u, re, 0.05))
    v += 0.15 * (_blob(u, le, 0.015) + _blob(u, re, 0.015))
    v -= 0.35 * _blob(u, nose, 0.055)
    v -= 0.30 * _segment(u, lm, rm, 0.025)
    v -= 0.20 * (_blob(u, lm, 0.035) + _blob(u, rm, 0.035))
    return np.clip(v, 0.0, 1.0)


def render_face(keypoints, bbox, canvas, noise=0.02, rng=None):
    """Draw a face whose normalized keypoints are ``keypoints`` into ``bbox``.

    ``canvas`` is ``(width, height)``; returns a ``(height, width)`` raster.
    """
    W, H = canvas
    x, y, w, h = bbox
    t = fit_tps(keypoints, TEMPLATE_KEYPOINTS, lam=0.0)
    xx, yy = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    face = np.column_stack([(xx.ravel() - x) / w, (yy.ravel() - y) / h])
    img = template_intensity(apply_tps(t, face)).reshape(H, W)
    if noise and rng is not None:
        img = np.clip(img + rng.normal(0.0, noise, img.shape), 0.0, 1.0)
    return img


def _rotate(pts, degrees, center=POSE_CENTER):
    a = math.radians(degrees)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return (pts - center) @ R.T + center


def human_layout(rng, max_rot=25.0):
    scale = rng.uniform(0.9, 1.1)
    pts = (TEMPLATE_KEYPOINTS - POSE_CENTER) * scale + POSE_CENTER
    pts = _rotate(pts, rng.uniform(-max_rot, max_rot))
    pts = pts + rng.uniform(-0.03, 0.03, 2) + rng.normal(0.0, 0.01, pts.shape)
    return pts


def animal_layout(rng, max_rot=20.0):
    pts = ANIMAL_KEYPOINTS.copy()
    spread = rng.uniform(0.85, 1.15)
    pts[:2, 0] = 0.5 + (pts[:2, 0] - 0.5) * spread
    snout = rng.uniform(0.9, 1.1)
    pts[2:, 1] = 0.28 + (pts[2:, 1] - 0.28) * snout
    pts = _rotate(pts, rng.uniform(-max_rot, max_rot))
    pts = pts + rng.uniform(-0.03, 0.03, 2) + rng.normal(0.0, 0.008, pts.shape)
    return pts


def make_faces(n, species, rng, canvas=80, prefix=None, noise=0.02):
    """``n`` random faces as ``(FaceAnnotation, raster)`` pairs.

    Each face sits in a random, roughly square box inside a ``canvas``-pixel
    square image; keypoints are all visible.
    """
    species = Species(species) if not isinstance(species, Species) else species
    prefix = prefix or species.value
    layout = human_layout if species is Species.HUMAN else animal_layout
    out = []
    for i in range(n):
        kp = layout(rng)
        w = rng.uniform(0.7, 0.85) * canvas
        h = w * rng.uniform(0.95, 1.05)
        x = rng.uniform(0, canvas - w)
        y = rng.uniform(0, canvas - h)
        bbox = (float(x), float(y), float(w), float(h))
        img = render_face(kp, bbox, (canvas, canvas), noise, rng)
        pix = kp * np.array([w, h]) + np.array([x, y])
        ann = FaceAnnotation(f"{prefix}_{i:04d}", f"{prefix}_{i:04d}.png", species, bbox,
                             KeypointSet(pix, np.ones(5, dtype=bool)))
        out.append((ann, img))
    return out


def make_samples(n, species, rng, size=64, **kw):
    return [crop_and_resize(a, img, size) for a, img in make_faces(n, species, rng, **kw)]
