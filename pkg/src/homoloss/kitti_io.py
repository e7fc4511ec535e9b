"""KITTI object labels and calibration files.

Label lines follow the devkit order (15 fields, optional 16th score)::

    type truncated occluded alpha x1 y1 x2 y2 h w l x y z rotation_y

Locations are bottom-face centers in the rectified camera frame (x right,
y down, z forward).  Field indices in :class:`ParseError` are 0-based.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DegenerateConfiguration, IllConditionedGradient, NonPositiveDepth, ParseError
from .geometry import (
    EPS_DEPTH,
    GROUND_TO_CAMERA,
    KITTI_CAMERA_HEIGHT,
    Box3D,
    CameraModel,
    bottom_points,
    camera_depth,
    project_points,
)
from .loss import TYPE1, TYPE2, LossConfig, SceneSample, homography_loss, projection_loss

DONT_CARE = "DontCare"
MAX_TRUNCATION = 0.98
BBOX_MARGIN = 15.0

# Easy difficulty of the object benchmark
EASY_MIN_HEIGHT = 40.0
EASY_MAX_OCCLUSION = 0
EASY_MAX_TRUNCATION = 0.15

LABEL_FIELDS = ("type", "truncated", "occluded", "alpha", "x1", "y1", "x2", "y2",
                "h", "w", "l", "x", "y", "z", "rotation_y")


@dataclass(frozen=True)
class KittiLabelRecord:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox2d: tuple          # (x1, y1, x2, y2) pixels
    dimensions: tuple      # (h, w, l) meters
    location: tuple        # (x, y, z) camera frame, bottom center
    rotation_y: float
    score: float | None = None

    @property
    def dont_care(self) -> bool:
        return self.type == DONT_CARE

    @property
    def bbox_height(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]

    def usable(self) -> bool:
        """Eligible for loss computation: not DontCare, not fully truncated."""
        return not self.dont_care and self.truncated <= MAX_TRUNCATION

    def is_easy(self, cls: str = "Car") -> bool:
        return (self.type == cls and self.bbox_height >= EASY_MIN_HEIGHT
                and self.occluded <= EASY_MAX_OCCLUSION and self.truncated <= EASY_MAX_TRUNCATION)


def _float(tok, line, idx):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"{LABEL_FIELDS[idx] if idx < 15 else 'score'}: not a number: {tok!r}",
                         line, idx) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {tok!r}", line, idx)
    return v


def parse_label_line(text: str, line: int | None = None) -> KittiLabelRecord:
    toks = text.split()
    if len(toks) < 15:
        raise ParseError(f"expected 15 fields, got {len(toks)} (missing {LABEL_FIELDS[len(toks)]})",
                         line, len(toks))
    if len(toks) > 16:
        raise ParseError(f"expected 15 or 16 fields, got {len(toks)}", line, 16)
    kind = toks[0]
    v = [_float(t, line, i) for i, t in enumerate(toks[1:], start=1)]
    trunc, occ = v[0], v[1]
    if kind != DONT_CARE:
        if not 0.0 <= trunc <= 1.0:
            raise ParseError(f"truncated must lie in [0, 1], got {trunc}", line, 1)
        if occ not in (0.0, 1.0, 2.0, 3.0):
            raise ParseError(f"occluded must be 0, 1, 2 or 3, got {toks[2]}", line, 2)
        for j in range(3):
            if v[7 + j] <= 0:
                raise ParseError(f"{LABEL_FIELDS[8 + j]} must be positive, got {v[7 + j]}", line, 8 + j)
    return KittiLabelRecord(
        type=kind,
        truncated=trunc,
        occluded=int(occ),
        alpha=v[2],
        bbox2d=tuple(v[3:7]),
        dimensions=tuple(v[7:10]),
        location=tuple(v[10:13]),
        rotation_y=v[13],
        score=v[14] if len(v) == 15 else None,
    )


def parse_labels(text: str) -> list:
    """One record per non-empty line; line numbers in errors are 1-based."""
    return [parse_label_line(raw, i)
            for i, raw in enumerate(text.splitlines(), start=1) if raw.strip()]


def serialize_label(r: KittiLabelRecord) -> str:
    vals = (r.truncated, r.occluded, r.alpha, *r.bbox2d, *r.dimensions, *r.location, r.rotation_y)
    s = "%s %.2f %d %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f" % (r.type, *vals)
    if r.score is not None:
        s += " %.2f" % r.score
    return s


def serialize_labels(records) -> str:
    return "".join(serialize_label(r) + "\n" for r in records)


def read_labels(path) -> list:
    with open(path) as f:
        return parse_labels(f.read())


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class KittiCalib:
    P2: np.ndarray
    matrices: dict = field(default_factory=dict, repr=False)


def parse_calib_matrices(text: str) -> KittiCalib:
    """Parse ``name: v1 v2 ...`` lines; P2 must be present with 12 numbers."""
    mats = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        name, sep, rest = raw.partition(":")
        if not sep:
            raise ParseError(f"expected 'NAME: values', got {raw.strip()!r}", i)
        vals = []
        for j, tok in enumerate(rest.split()):
            try:
                x = float(tok)
            except ValueError:
                raise ParseError(f"{name.strip()}: not a number: {tok!r}", i, j) from None
            if not math.isfinite(x):
                raise ParseError(f"{name.strip()}: non-finite value {tok!r}", i, j)
            vals.append(x)
        mats[name.strip()] = (i, np.array(vals))
    if "P2" not in mats:
        raise ParseError("no 'P2:' line in calibration")
    line, p2 = mats["P2"]
    if p2.size != 12:
        raise ParseError(f"P2 needs 12 numbers, got {p2.size}", line, min(p2.size, 12))
    return KittiCalib(P2=p2.reshape(3, 4), matrices={k: v for k, (_, v) in mats.items()})


def decompose_projection(P):
    """Split a 3x4 projection into ``K`` (upper triangular, K[2,2] = 1), ``R``, ``t``.

    ``P ~ K [R | t]``; for rectified KITTI matrices R is the identity and
    ``t = K^-1 p4`` is the stereo baseline offset.
    """
    P = np.asarray(P, dtype=float).reshape(3, 4)
    K, R = scipy.linalg.rq(P[:, :3])
    D = np.diag(np.sign(np.diag(K)))
    K, R = K @ D, D @ R
    scale = K[2, 2]
    if not abs(scale) > 0:
        raise ParseError("projection matrix has a singular left 3x3 block")
    K = K / scale
    t = np.linalg.solve(K, P[:, 3] / scale)
    if np.linalg.det(R) < 0:
        R, t = -R, -t
    K[np.abs(K) < 1e-12 * np.abs(K).max()] = 0.0
    K[1, 0] = K[2, 0] = K[2, 1] = 0.0
    K[2, 2] = 1.0
    return K, R, t


def camera_from_projection(P, camera_height: float = KITTI_CAMERA_HEIGHT) -> CameraModel:
    """Ground-frame camera whose rectified frame sits ``camera_height`` above z = 0.

    A ground point X maps to the rectified frame as ``G2C X + (0, h, 0)``
    (y points down), then through ``P``.
    """
    if not camera_height > 0:
        raise ValueError(f"camera_height must be positive, got {camera_height}")
    K, Rr, tr = decompose_projection(P)
    R = Rr @ GROUND_TO_CAMERA
    t = Rr @ np.array([0.0, camera_height, 0.0]) + tr
    return CameraModel(K=K, R=R, t=t)


def parse_calib(text: str, camera_height: float = KITTI_CAMERA_HEIGHT) -> CameraModel:
    return camera_from_projection(parse_calib_matrices(text).P2, camera_height)


def read_calib(path, camera_height: float = KITTI_CAMERA_HEIGHT) -> CameraModel:
    with open(path) as f:
        return parse_calib(f.read(), camera_height)


# ---------------------------------------------------------------- frames

def to_ground_frame(record: KittiLabelRecord, camera_height: float = KITTI_CAMERA_HEIGHT) -> Box3D:
    """Ground-frame box under the flat-ground assumption.

    The camera-frame (x, z) location becomes the BEV center and the vertical
    coordinate is dropped; ``camera_height`` only fixes where the ground
    plane sits and does not change the BEV position.  A heading along the
    camera x axis (rotation_y = 0) has yaw 0; rotation_y turns about the
    downward y axis, so yaw = -rotation_y.
    """
    if record.dont_care:
        raise ValueError("DontCare records carry no 3D box")
    h, w, l = record.dimensions
    x, _, z = record.location
    return Box3D(center_x=x, center_y=z, yaw=-record.rotation_y,
                 length=l, width=w, height=h, class_id=record.type)


def camera_frame_bottom_points(record: KittiLabelRecord) -> np.ndarray:
    """Bottom center and corners in the rectified camera frame, shape (5, 3)."""
    h, w, l = record.dimensions
    c, s = math.cos(record.rotation_y), math.sin(record.rotation_y)
    Ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    local = np.array([[0, 0, 0], [l / 2, 0, w / 2], [-l / 2, 0, w / 2],
                      [-l / 2, 0, -w / 2], [l / 2, 0, -w / 2]], dtype=float)
    return local @ Ry.T + np.asarray(record.location)


def project_with_p2(P, pts_cam) -> np.ndarray:
    X = np.column_stack([pts_cam, np.ones(len(pts_cam))]) @ np.asarray(P, dtype=float).T
    return X[:, :2] / X[:, 2:3]


def bbox_consistency(records, camera: CameraModel, margin: float = BBOX_MARGIN, cls: str = "Car"):
    """Fraction of Easy objects whose projected bottom corners lie in their 2D box.

    Returns ``(fraction, n_checked)``; fraction is ``nan`` when nothing was checked.
    """
    hits = n = 0
    for r in records:
        if not r.is_easy(cls):
            continue
        pts = bottom_points(to_ground_frame(r))[1:]
        if np.any(camera_depth(camera, pts) <= EPS_DEPTH):
            n += 1
            continue
        q = project_points(camera, pts)
        x1, y1, x2, y2 = r.bbox2d
        inside = ((q[:, 0] >= x1 - margin) & (q[:, 0] <= x2 + margin)
                  & (q[:, 1] >= y1 - margin) & (q[:, 1] <= y2 + margin))
        n += 1
        hits += bool(inside.all())
    return (hits / n if n else math.nan), n


def scene_from_labels(records, camera: CameraModel) -> SceneSample | None:
    """Ground-truth scene of usable objects fully in front of the camera.

    Returns ``None`` when no object qualifies.
    """
    boxes = []
    for r in records:
        if not r.usable():
            continue
        box = to_ground_frame(r)
        if np.all(camera_depth(camera, bottom_points(box)) > EPS_DEPTH):
            boxes.append(box)
    if not boxes:
        return None
    return SceneSample(camera=camera, gt_boxes=tuple(boxes))


@dataclass
class FrameCheck:
    frame: str
    n_objects: int = 0
    skipped: bool = False
    reason: str = ""
    loss_at_truth: dict = field(default_factory=dict)
    bbox_fraction: float = math.nan
    bbox_checked: int = 0
    error: str = ""


def check_frame(frame: str, label_text: str, calib_text: str,
                camera_height: float = KITTI_CAMERA_HEIGHT) -> FrameCheck:
    """Noise-free self-consistency of one frame; parse errors are recorded, not raised."""
    out = FrameCheck(frame)
    try:
        records = parse_labels(label_text)
        camera = parse_calib(calib_text, camera_height)
    except (ParseError, ValueError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
        out.skipped, out.reason = True, "parse error"
        return out
    out.bbox_fraction, out.bbox_checked = bbox_consistency(records, camera)
    scene = scene_from_labels(records, camera)
    if scene is None:
        out.skipped, out.reason = True, "no usable objects"
        return out
    scene = scene.with_predictions(scene.gt_boxes)
    out.n_objects = scene.n_objects
    try:
        for mode in (TYPE1, TYPE2):
            rep = homography_loss(scene, LossConfig(mode=mode))
            if rep.skipped:
                out.skipped, out.reason = True, rep.reason
            else:
                out.loss_at_truth[mode] = rep.value
        out.loss_at_truth["projection"] = projection_loss(scene).value
    except (NonPositiveDepth, DegenerateConfiguration, IllConditionedGradient) as exc:
        out.skipped, out.reason = True, f"{type(exc).__name__}: {exc}"
    return out


def _read(path):
    with open(path) as f:
        return f.read()


def pair_files(labels_dir, calib_dir) -> list:
    """``(frame, label_path, calib_path)`` for frames present in both directories."""
    labels = {os.path.splitext(n)[0]: os.path.join(labels_dir, n)
              for n in os.listdir(labels_dir) if n.endswith(".txt")}
    calibs = {os.path.splitext(n)[0]: os.path.join(calib_dir, n)
              for n in os.listdir(calib_dir) if n.endswith(".txt")}
    return [(k, labels[k], calibs[k]) for k in sorted(labels.keys() & calibs.keys())]


def evaluate_frames(labels_dir, calib_dir, camera_height: float = KITTI_CAMERA_HEIGHT) -> dict:
    """Per-frame checks plus totals: skip rate, worst loss at truth, bbox statistic."""
    frames = [check_frame(k, _read(lp), _read(cp), camera_height)
              for k, lp, cp in pair_files(labels_dir, calib_dir)]
    hits = sum(f.bbox_fraction * f.bbox_checked for f in frames if f.bbox_checked)
    checked = sum(f.bbox_checked for f in frames)
    worst = {}
    for f in frames:
        for k, v in f.loss_at_truth.items():
            worst[k] = max(worst.get(k, 0.0), v)
    n = len(frames)
    return {
        "n_frames": n,
        "n_objects": sum(f.n_objects for f in frames),
        "n_skipped": sum(f.skipped for f in frames),
        "skip_rate": (sum(f.skipped for f in frames) / n) if n else math.nan,
        "parse_errors": sum(bool(f.error) for f in frames),
        "max_loss_at_truth": worst,
        "bbox_consistency": (hits / checked) if checked else math.nan,
        "bbox_checked": checked,
        "frames": frames,
    }
