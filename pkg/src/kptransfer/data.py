"""Annotation loading, face cropping and label-consistent augmentation.

Annotation documents are JSON arrays of records::

    {"id": "horse_0001", "image_path": "img/horse_0001.png", "species": "animal",
     "bbox": [x, y, w, h],
     "keypoints": {"left_eye": [x, y, 1], "right_eye": [x, y, 0], ...}}

Coordinates are pixels in the continuous frame where pixel ``(c, r)`` covers
``[c, c+1) x [r, r+1)``. All five keypoint names must be present; invisible
ones carry ``visible = 0`` and arbitrary coordinates.
"""

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptyIntersection, InvalidRotation, ParseError, ValidationError
from .pose import KEYPOINT_NAMES, KeypointSet
from .tps import bilinear_sample

log = logging.getLogger(__name__)

ROTATIONS = (-10, -5, 0, 5, 10)
MIN_MATCH_KEYPOINTS = 3


class Species(enum.Enum):
    HUMAN = "human"
    ANIMAL = "animal"


@dataclass(frozen=True)
class FaceAnnotation:
    id: str
    image_path: str
    species: Species
    bbox: tuple
    keypoints: KeypointSet
    # Faces with fewer than three visible keypoints are kept for evaluation only.
    matchable: bool = True

    @property
    def bbox_size(self):
        return math.sqrt(self.bbox[2] * self.bbox[3])

    def to_record(self):
        kps = {
            name: [float(self.keypoints.points[i, 0]), float(self.keypoints.points[i, 1]),
                   int(self.keypoints.visible[i])]
            for i, name in enumerate(KEYPOINT_NAMES)
        }
        return {
            "id": self.id,
            "image_path": self.image_path,
            "species": self.species.value,
            "bbox": [float(v) for v in self.bbox],
            "keypoints": kps,
        }


@dataclass(frozen=True)
class Sample:
    """A face cropped to the canonical ``size x size`` frame.

    ``keypoints`` are canonical pixel coordinates in ``[0, size]``; ``bbox`` is
    the source crop, so ``orig = canon * (w, h) / size + (x, y)``.
    """

    pixels: np.ndarray
    keypoints: KeypointSet
    bbox_size: float
    bbox: tuple
    provenance: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.pixels.shape[0]

    def normalized_keypoints(self):
        return self.keypoints.transformed(1.0 / self.size)

    def to_original(self, pts):
        """Map canonical pixel coordinates back to source-image pixels."""
        x, y, w, h = self.bbox
        return np.asarray(pts, dtype=float) * np.array([w, h]) / self.size + np.array([x, y])


def _parse_record(rec, pos):
    if not isinstance(rec, dict):
        raise ParseError(f"record {pos}: expected an object, got {type(rec).__name__}")
    try:
        rid = str(rec["id"])
        species = Species(str(rec["species"]).lower())
        bbox = tuple(float(v) for v in rec["bbox"])
        raw = rec["keypoints"]
        image_path = str(rec.get("image_path", ""))
    except KeyError as exc:
        raise ParseError(f"record {pos}: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ParseError(f"record {pos}: {exc}") from None
    if len(bbox) != 4:
        raise ParseError(f"record {pos} ({rid}): bbox needs 4 numbers")
    pts = np.zeros((5, 2))
    vis = np.zeros(5, dtype=bool)
    for i, name in enumerate(KEYPOINT_NAMES):
        if name not in raw:
            raise ParseError(f"record {pos} ({rid}): missing keypoint {name!r}")
        entry = raw[name]
        if len(entry) != 3:
            raise ParseError(f"record {pos} ({rid}): keypoint {name!r} needs [x, y, visible]")
        pts[i] = float(entry[0]), float(entry[1])
        vis[i] = bool(entry[2])
    return rid, image_path, species, bbox, KeypointSet(pts, vis)


def parse_annotations(text, source="<string>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, list):
        raise ParseError(f"{source}: top level must be an array of records")
    out = []
    bad = []
    for pos, rec in enumerate(doc):
        rid, image_path, species, bbox, kp = _parse_record(rec, pos)
        x, y, w, h = bbox
        if not (w > 0 and h > 0):
            bad.append(rid)
            continue
        if not np.all(np.isfinite(kp.points[kp.visible])):
            bad.append(rid)
            continue
        vp = kp.points[kp.visible]
        if np.any((vp < [x, y]) | (vp > [x + w, y + h])):
            log.warning("%s: visible keypoint outside its bounding box", rid)
        out.append(FaceAnnotation(rid, image_path, species, bbox, kp,
                                  matchable=kp.n_visible >= MIN_MATCH_KEYPOINTS))
    if bad:
        raise ValidationError(f"{source}: invalid records {bad}", bad)
    return out


def load_annotations(path):
    path = Path(path)
    return parse_annotations(path.read_text(), source=str(path))


def save_annotations(path, annotations):
    Path(path).write_text(json.dumps([a.to_record() for a in annotations], indent=1) + "\n")


def load_image(path):
    """Read an 8-bit grayscale or RGB raster as luminance in ``[0, 1]``."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=float) / 255.0


def save_image(path, img):
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def crop_and_resize(ann, img, size):
    """Resample ``ann.bbox`` of ``img`` to ``size x size`` and map keypoints along."""
    img = np.asarray(img, dtype=float)
    H, W = img.shape
    x, y, w, h = ann.bbox
    if x >= W or y >= H or x + w <= 0 or y + h <= 0:
        raise EmptyIntersection(f"{ann.id}: bbox {ann.bbox} misses the {W}x{H} image")
    centers = np.arange(size) + 0.5
    xs = x + centers * (w / size) - 0.5
    ys = y + centers * (h / size) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    pixels = bilinear_sample(img, gx, gy)
    kp = ann.keypoints.transformed(np.array([size / w, size / h]),
                                   np.array([-x * size / w, -y * size / h]))
    return Sample(pixels, kp, ann.bbox_size, tuple(ann.bbox),
                  {"id": ann.id, "flip": False, "rot": 0})


def augment(s, flip, rot_degrees):
    """Horizontal flip (with left/right label swap) then rotation about the center.

    Keypoints rotated out of ``[0, size]^2`` become invisible.
    """
    if rot_degrees not in ROTATIONS:
        raise InvalidRotation(f"rotation must be one of {ROTATIONS}, got {rot_degrees}")
    S = s.size
    pixels = s.pixels
    kp = s.keypoints
    if flip:
        pixels = pixels[:, ::-1].copy()
        kp = kp.flipped(S)
    if rot_degrees:
        c = S / 2.0
        a = math.radians(rot_degrees)
        cos, sin = math.cos(a), math.sin(a)
        q = np.arange(S) + 0.5 - c
        qx, qy = np.meshgrid(q, q)
        # Inverse rotation gives the source location of each output pixel.
        sx = cos * qx + sin * qy + c - 0.5
        sy = -sin * qx + cos * qy + c - 0.5
        pixels = bilinear_sample(pixels, sx, sy)
        kp = kp.rotated(rot_degrees, (c, c))
        inside = np.all((kp.points >= 0) & (kp.points <= S), axis=1)
        kp = KeypointSet(kp.points, kp.visible & inside)
    prov = dict(s.provenance)
    prov["flip"] = bool(prov.get("flip", False)) ^ bool(flip)
    prov["rot"] = prov.get("rot", 0) + rot_degrees
    return replace(s, pixels=pixels, keypoints=kp, provenance=prov)
