"""Homography loss, its replicated ensemble, and the baseline losses.

Every loss returns a :class:`LossReport` carrying the value, per-point
residuals, and analytic gradients keyed by the predicted quantity they belong
to:

``"points"``
    (5N, 2) predicted BEV bottom points, stacked object by object.
``"pixels"``
    (5N, 2) projected predicted points (Type 2 only).
``"centers_px"``, ``"depths"``
    (N, 2) predicted image centers and (N,) predicted depths
    (replicated mode only).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateConfiguration, IllConditionedGradient, VanishingHomogeneousScale
from .geometry import (
    Box3D,
    CameraModel,
    backproject_jacobian,
    backproject_points,
    camera_depth,
    point_grad_to_centers,
    project_points,
    projection_jacobian,
    stack_bottom_points,
    EPS_DEPTH,
)
from .homography import HomographySolve, apply_homography, apply_homography_vjp

TYPE1 = "type1"
TYPE2 = "type2"

# homography residuals this small (relative to the coordinate magnitude) are
# rounding noise of an exact fit and are treated as zero
EPS_RESIDUAL = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Weights and switches for :func:`total_loss`.

    ``warmup_steps`` delays the homography term: it is evaluated only once
    ``step >= warmup_steps``.  ``reg_loss`` selects plain L1 (default) or
    SmoothL1 with the same ``beta`` for the regression term.
    """

    mode: str = TYPE1
    beta: float = 1.0
    lambda_homo: float = 0.2
    lambda_reg: float = 2.0
    warmup_steps: int = 0
    replicate: bool = False
    reg_loss: str = "l1"

    def __post_init__(self):
        if self.mode not in (TYPE1, TYPE2):
            raise ValueError(f"mode must be {TYPE1!r} or {TYPE2!r}, got {self.mode!r}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.lambda_homo < 0 or self.lambda_reg < 0:
            raise ValueError("loss weights must be non-negative")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.reg_loss not in ("l1", "smooth_l1"):
            raise ValueError(f"reg_loss must be 'l1' or 'smooth_l1', got {self.reg_loss!r}")


@dataclass
class SceneSample:
    """Ground truth and (optionally) predictions for one image.

    ``pred_boxes`` is aligned index by index with ``gt_boxes``.  The optional
    ``pred_centers_px``/``pred_depths`` are the predicted image position and
    camera depth of each bottom center, used by the replicated loss.
    ``reg_targets`` replaces ``gt_boxes`` as the regression supervision when set.
    """

    camera: CameraModel
    gt_boxes: list
    pred_boxes: list | None = None
    pred_centers_px: np.ndarray | None = None
    pred_depths: np.ndarray | None = None
    reg_targets: list | None = None

    def __post_init__(self):
        self.gt_boxes = list(self.gt_boxes)
        n = len(self.gt_boxes)
        if n < 1:
            raise ValueError("a scene needs at least one ground-truth box")
        if self.pred_boxes is not None:
            self.pred_boxes = list(self.pred_boxes)
            if len(self.pred_boxes) != n:
                raise ValueError(f"{len(self.pred_boxes)} predictions for {n} ground-truth boxes")
        if self.reg_targets is not None:
            self.reg_targets = list(self.reg_targets)
            if len(self.reg_targets) != n:
                raise ValueError("reg_targets must align with gt_boxes")
        if self.pred_centers_px is not None:
            self.pred_centers_px = np.asarray(self.pred_centers_px, dtype=float).reshape(n, 2)
        if self.pred_depths is not None:
            self.pred_depths = np.asarray(self.pred_depths, dtype=float).reshape(n)
        depth = camera_depth(self.camera, self.gt_points)
        if np.any(depth <= EPS_DEPTH):
            raise ValueError("every ground-truth bottom point must lie in front of the camera")

    @property
    def n_objects(self) -> int:
        return len(self.gt_boxes)

    @property
    def gt_points(self) -> np.ndarray:
        return stack_bottom_points(self.gt_boxes)

    @property
    def pred_points(self) -> np.ndarray:
        if self.pred_boxes is None:
            raise ValueError("scene has no predictions")
        return stack_bottom_points(self.pred_boxes)

    @property
    def target_points(self) -> np.ndarray:
        return stack_bottom_points(self.reg_targets if self.reg_targets is not None else self.gt_boxes)

    def gt_components(self):
        """Image position and camera depth of each ground-truth bottom center."""
        centers = np.array([b.center for b in self.gt_boxes])
        return project_points(self.camera, centers), camera_depth(self.camera, centers)

    def with_predictions(self, pred_boxes, **kwargs) -> "SceneSample":
        return replace(self, pred_boxes=list(pred_boxes), **kwargs)


@dataclass
class LossReport:
    value: float
    residuals: np.ndarray | None = None
    grads: dict = field(default_factory=dict)
    skipped: bool = False
    reason: str | None = None
    info: dict = field(default_factory=dict)

    @classmethod
    def skip(cls, reason: str, **info) -> "LossReport":
        return cls(value=0.0, skipped=True, reason=reason, info=dict(info))


def smooth_l1(residual, beta: float = 1.0):
    """Element-wise SmoothL1: ``0.5 r^2 / beta`` inside ``|r| < beta``, else ``|r| - beta/2``."""
    r = np.asarray(residual, dtype=float)
    a = np.abs(r)
    out = np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(residual, beta: float = 1.0):
    r = np.asarray(residual, dtype=float)
    return np.where(np.abs(r) < beta, r / beta, np.sign(r))


# ---------------------------------------------------------------------------
# point-level losses


def regression_loss_points(target_pts, pred_pts, kind: str = "l1", beta: float = 1.0) -> LossReport:
    """Mean per-coordinate L1 (or SmoothL1) between targets and predictions."""
    target_pts = np.asarray(target_pts, dtype=float)
    pred_pts = np.asarray(pred_pts, dtype=float)
    r = target_pts - pred_pts
    count = r.size
    if kind == "l1":
        value = np.abs(r).sum() / count
        grad = np.sign(pred_pts - target_pts) / count
    elif kind == "smooth_l1":
        value = smooth_l1(r, beta).sum() / count
        grad = -smooth_l1_grad(r, beta) / count
    else:
        raise ValueError(f"unknown regression loss {kind!r}")
    return LossReport(float(value), residuals=r, grads={"points": grad})


def projection_loss_points(camera: CameraModel, gt_pts, pred_pts, beta: float = 1.0) -> LossReport:
    """Per-point SmoothL1 on pixel residuals between projected predictions and truth.

    Predicted points with non-positive depth are excluded from the mean and
    counted in ``info["excluded"]``; their gradient is zero.
    """
    gt_pts = np.asarray(gt_pts, dtype=float)
    pred_pts = np.asarray(pred_pts, dtype=float)
    ok = camera_depth(camera, pred_pts) > EPS_DEPTH
    n_ok = int(ok.sum())
    grad = np.zeros_like(pred_pts)
    residuals = np.full_like(pred_pts, np.nan)
    if n_ok == 0:
        return LossReport.skip("no predicted point in front of the camera", excluded=len(pred_pts))
    q_gt = project_points(camera, gt_pts[ok])
    q_pred = project_points(camera, pred_pts[ok])
    r = q_gt - q_pred
    residuals[ok] = r
    value = smooth_l1(r, beta).sum() / n_ok
    g_q = -smooth_l1_grad(r, beta) / n_ok
    J = projection_jacobian(camera, pred_pts[ok])
    grad[ok] = np.einsum("ni,nij->nj", g_q, J)
    return LossReport(float(value), residuals=residuals, grads={"points": grad},
                      info={"excluded": len(pred_pts) - n_ok})


def homography_loss_points(camera: CameraModel, gt_pts, pred_pts, mode: str = TYPE1,
                           beta: float = 1.0) -> LossReport:
    """Homography loss for one scene given stacked bottom points.

    Type 1 fits ``H`` to (projected gt -> predicted BEV) pairs and penalizes
    ``gt - H(q_gt)``; predictions enter only through ``H``.  Type 2 fits
    ``H`` to (projected prediction -> gt BEV) and penalizes
    ``gt - H(q_pred)``; predictions enter through ``H`` and directly.

    Degenerate or ill-conditioned fits return a skipped report.
    """
    gt_pts = np.asarray(gt_pts, dtype=float)
    pred_pts = np.asarray(pred_pts, dtype=float)
    m = len(gt_pts)
    try:
        q_gt = project_points(camera, gt_pts)
        if mode == TYPE1:
            src, dst = q_gt, pred_pts
        elif mode == TYPE2:
            src, dst = project_points(camera, pred_pts), gt_pts
        else:
            raise ValueError(f"unknown homography mode {mode!r}")
        solve = HomographySolve(src, dst)
        mapped = apply_homography(solve.H, src)
        r = gt_pts - mapped
        r[np.abs(r) <= EPS_RESIDUAL * np.maximum(1.0, np.abs(gt_pts))] = 0.0
        value = smooth_l1(r, beta).sum() / m
        g_mapped = -smooth_l1_grad(r, beta) / m
        g_H, g_src_direct = apply_homography_vjp(solve.H, src, g_mapped)
        g_src, g_dst = solve.backward(g_H)
    except (DegenerateConfiguration, IllConditionedGradient, VanishingHomogeneousScale) as exc:
        return LossReport.skip(f"{type(exc).__name__}: {exc}")

    if mode == TYPE1:
        grads = {"points": g_dst}
    else:
        g_pixels = g_src + g_src_direct
        J = projection_jacobian(camera, pred_pts)
        grads = {"pixels": g_pixels, "points": np.einsum("ni,nij->nj", g_pixels, J)}
    return LossReport(float(value), residuals=r, grads=grads,
                      info={"H": solve.H, "singular_values": solve.singular_values})


# ---------------------------------------------------------------------------
# scene-level losses


def regression_loss(scene: SceneSample, kind: str = "l1", beta: float = 1.0) -> LossReport:
    return regression_loss_points(scene.target_points, scene.pred_points, kind, beta)


def projection_loss(scene: SceneSample, beta: float = 1.0) -> LossReport:
    return projection_loss_points(scene.camera, scene.gt_points, scene.pred_points, beta)


def homography_loss(scene: SceneSample, config: LossConfig = LossConfig()) -> LossReport:
    return homography_loss_points(scene.camera, scene.gt_points, scene.pred_points,
                                  config.mode, config.beta)


def boxes_from_components(camera: CameraModel, boxes, centers_px, depths) -> list:
    """Move each box so its bottom center is ``backproject(center_px, depth)``."""
    centers = backproject_points(camera, centers_px, depths)
    return [b.moved_to(x, y) for b, (x, y) in zip(boxes, centers)]


def points_grad_to_components(camera, centers_px, depths, grad_points):
    d_pix, d_depth = backproject_jacobian(camera, centers_px, depths)
    g_center = point_grad_to_centers(grad_points)
    return np.einsum("ni,nij->nj", g_center, d_pix), np.einsum("ni,ni->n", g_center, d_depth)


REPLICA_NAMES = ("pred_center+pred_depth", "pred_center+gt_depth", "gt_center+pred_depth")


def replicated_homography_loss(scene: SceneSample, config: LossConfig = LossConfig()) -> LossReport:
    """Sum of three homography losses built from mixed (center, depth) components.

    The predicted bottom centers are rebuilt by back-projection from
    (pred center, pred depth), (pred center, gt depth) and
    (gt center, pred depth); yaw and size come from ``scene.pred_boxes``.
    A skipped variant contributes nothing; the report is skipped only if all
    three are.
    """
    if scene.pred_centers_px is None or scene.pred_depths is None:
        raise ValueError("replicated loss needs pred_centers_px and pred_depths")
    if scene.pred_boxes is None:
        raise ValueError("scene has no predictions")
    c_gt, d_gt = scene.gt_components()
    c_pred, d_pred = scene.pred_centers_px, scene.pred_depths
    variants = ((c_pred, d_pred, True, True), (c_pred, d_gt, True, False),
                (c_gt, d_pred, False, True))
    gt_pts = scene.gt_points
    value = 0.0
    g_c = np.zeros_like(c_pred)
    g_d = np.zeros_like(d_pred)
    parts, skipped = {}, {}
    for name, (c, d, uses_c, uses_d) in zip(REPLICA_NAMES, variants):
        try:
            boxes = boxes_from_components(scene.camera, scene.pred_boxes, c, d)
        except ValueError as exc:  # NonPositiveDepth from a bad predicted depth
            skipped[name] = str(exc)
            continue
        rep = homography_loss_points(scene.camera, gt_pts, stack_bottom_points(boxes),
                                     config.mode, config.beta)
        if rep.skipped:
            skipped[name] = rep.reason
            continue
        parts[name] = rep.value
        value += rep.value
        gc, gd = points_grad_to_components(scene.camera, c, d, rep.grads["points"])
        if uses_c:
            g_c += gc
        if uses_d:
            g_d += gd
    if not parts:
        return LossReport.skip("all replicas skipped", replicas=skipped)
    return LossReport(float(value), grads={"centers_px": g_c, "depths": g_d},
                      info={"replicas": parts, "skipped_replicas": skipped})


def total_loss(scene: SceneSample, config: LossConfig, step: int = 0) -> LossReport:
    """``(lambda_reg * L_reg + lambda_homo * L_homo) / N``.

    The homography term is evaluated only when ``lambda_homo > 0`` and
    ``step >= config.warmup_steps``; otherwise no homography work is done at
    all.  A skipped homography term contributes zero and is recorded in
    ``info["homography_skipped"]``.

    In replicated mode the predicted centers are rebuilt from
    ``pred_centers_px``/``pred_depths`` and gradients are reported for those
    components; otherwise gradients are on the predicted bottom points.
    """
    n = scene.n_objects
    info = {"homography_active": False}
    if config.replicate:
        c_pred, d_pred = scene.pred_centers_px, scene.pred_depths
        if c_pred is None or d_pred is None:
            raise ValueError("replicated loss needs pred_centers_px and pred_depths")
        pred_boxes = boxes_from_components(scene.camera, scene.pred_boxes, c_pred, d_pred)
        scene = scene.with_predictions(pred_boxes)

    reg = regression_loss(scene, config.reg_loss, config.beta)
    value = config.lambda_reg * reg.value / n
    g_points = config.lambda_reg * reg.grads["points"] / n
    info["regression"] = reg.value

    homo = None
    if config.lambda_homo > 0 and step >= config.warmup_steps:
        info["homography_active"] = True
        homo = replicated_homography_loss(scene, config) if config.replicate \
            else homography_loss(scene, config)
        if homo.skipped:
            info["homography_skipped"] = homo.reason
        else:
            info["homography"] = homo.value
            value += config.lambda_homo * homo.value / n

    if not config.replicate:
        if homo is not None and not homo.skipped:
            g_points = g_points + config.lambda_homo * homo.grads["points"] / n
        return LossReport(float(value), residuals=reg.residuals, grads={"points": g_points}, info=info)

    g_c, g_d = points_grad_to_components(scene.camera, c_pred, d_pred, g_points)
    if homo is not None and not homo.skipped:
        g_c = g_c + config.lambda_homo * homo.grads["centers_px"] / n
        g_d = g_d + config.lambda_homo * homo.grads["depths"] / n
    return LossReport(float(value), residuals=reg.residuals,
                      grads={"centers_px": g_c, "depths": g_d}, info=info)
