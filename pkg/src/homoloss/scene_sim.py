"""Synthetic scenes, prediction noise, proposal selection and a descent harness.

Everything here is deterministic given its seed.  Seeds may be ints or
sequences of ints (fed to :func:`numpy.random.default_rng`), which lets one
experiment seed drive several independent streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DivergedRun, GenerationExhausted
from .geometry import (
    Box3D,
    KITTI_CAMERA_HEIGHT,
    KITTI_IMAGE_SIZE,
    KITTI_K,
    backproject_points,
    bottom_points,
    camera_depth,
    make_camera,
    point_grad_to_centers,
    project_points,
    EPS_DEPTH,
)
from .loss import (
    LossConfig,
    SceneSample,
    boxes_from_components,
    points_grad_to_components,
    total_loss,
)
from .metrics import center_error, rotated_bev_iou

CAR_DIMS = ((3.5, 4.6), (1.5, 1.9), (1.4, 1.7))  # length, width, height ranges (m)


@dataclass(frozen=True)
class SceneGenParams:
    n_boxes: tuple = (4, 10)
    depth_range: tuple = (8.0, 50.0)
    lateral_range: tuple = (-15.0, 15.0)
    yaw_range: tuple = (-math.pi, math.pi)
    dim_ranges: dict = field(default_factory=lambda: {"Car": CAR_DIMS})
    image_size: tuple = KITTI_IMAGE_SIZE
    K: tuple = tuple(map(tuple, KITTI_K))
    camera_height: float = KITTI_CAMERA_HEIGHT
    pitch: float = 0.0
    seed: object = 0
    max_attempts: int = 2000

    def __post_init__(self):
        lo, hi = self.n_boxes
        if not 1 <= lo <= hi:
            raise ValueError(f"n_boxes range must satisfy 1 <= min <= max, got {self.n_boxes}")
        for name in ("depth_range", "lateral_range", "yaw_range"):
            a, b = getattr(self, name)
            if not a <= b:
                raise ValueError(f"{name} is empty: {(a, b)}")
        if self.depth_range[0] <= 0:
            raise ValueError("depth_range must be positive")
        if not self.dim_ranges:
            raise ValueError("dim_ranges needs at least one class")
        for cls, ranges in self.dim_ranges.items():
            if len(ranges) != 3 or any(not 0 < a <= b for a, b in ranges):
                raise ValueError(f"bad dimension ranges for {cls!r}: {ranges}")

    def camera(self):
        return make_camera(np.array(self.K, dtype=float), self.camera_height, pitch=self.pitch)


def _inside_image(camera, box, image_size):
    pts = bottom_points(box)
    if np.any(camera_depth(camera, pts) <= EPS_DEPTH):
        return False
    q = project_points(camera, pts)
    w, h = image_size
    return bool(np.all((q[:, 0] >= 0) & (q[:, 0] <= w) & (q[:, 1] >= 0) & (q[:, 1] <= h)))


def generate_scene(params: SceneGenParams) -> SceneSample:
    """Ground-truth-only scene by rejection sampling.

    Boxes never overlap in BEV, their centers lie in ``depth_range`` and all
    bottom points project inside the image.

    Raises:
        GenerationExhausted: if a box cannot be placed in ``max_attempts`` draws.
    """
    rng = np.random.default_rng(params.seed)
    camera = params.camera()
    classes = sorted(params.dim_ranges)
    n = int(rng.integers(params.n_boxes[0], params.n_boxes[1] + 1))
    boxes = []
    for i in range(n):
        for _ in range(params.max_attempts):
            cls = classes[int(rng.integers(len(classes)))]
            (l0, l1), (w0, w1), (h0, h1) = params.dim_ranges[cls]
            box = Box3D(
                center_x=rng.uniform(*params.lateral_range),
                center_y=rng.uniform(*params.depth_range),
                yaw=rng.uniform(*params.yaw_range),
                length=rng.uniform(l0, l1),
                width=rng.uniform(w0, w1),
                height=rng.uniform(h0, h1),
                class_id=cls,
            )
            if not _inside_image(camera, box, params.image_size):
                continue
            if any(rotated_bev_iou(box, other) > 0 for other in boxes):
                continue
            boxes.append(box)
            break
        else:
            raise GenerationExhausted(
                f"could not place box {i + 1} of {n} after {params.max_attempts} attempts"
            )
    return SceneSample(camera=camera, gt_boxes=boxes)


@dataclass(frozen=True)
class NoiseModel:
    """Per-object Gaussian noise whose scale grows with depth.

    The standard deviation at camera depth ``d`` is
    ``sigma_base + sigma_per_meter * d``.  ``bias_per_meter`` adds a
    systematic (lateral, forward) offset of ``d * bias_per_meter``.

    With ``component_mode`` the noise goes to the bottom center's image
    position (``sigma_pixel``, pixels) and to its depth (meters, including
    the forward bias) instead of the BEV position.
    """

    sigma_base: float = 0.0
    sigma_per_meter: float = 0.0
    bias_per_meter: tuple = (0.0, 0.0)
    component_mode: bool = False
    sigma_pixel: float = 0.0
    sigma_yaw: float = 0.0

    def __post_init__(self):
        if min(self.sigma_base, self.sigma_per_meter, self.sigma_pixel, self.sigma_yaw) < 0:
            raise ValueError("noise sigmas must be non-negative")

    def sigma(self, depth):
        return self.sigma_base + self.sigma_per_meter * np.asarray(depth, dtype=float)


def _draw(scene, noise, rng):
    """One noisy copy of the gt boxes, plus its (center pixel, depth) components."""
    camera = scene.camera
    c_gt, d_gt = scene.gt_components()
    sig = noise.sigma(d_gt)
    n = scene.n_objects
    bias = np.asarray(noise.bias_per_meter, dtype=float)
    dyaw = rng.normal(0.0, 1.0, n) * noise.sigma_yaw
    if noise.component_mode:
        c = c_gt + rng.normal(0.0, 1.0, (n, 2)) * noise.sigma_pixel
        d = d_gt + rng.normal(0.0, 1.0, n) * sig + bias[1] * d_gt
        centers = backproject_points(camera, c, d)
    else:
        centers = np.array([b.center for b in scene.gt_boxes])
        centers = centers + rng.normal(0.0, 1.0, (n, 2)) * sig[:, None] + d_gt[:, None] * bias
        c, d = project_points(camera, centers), camera_depth(camera, centers)
    boxes = [Box3D(x, y, b.yaw + dy, b.length, b.width, b.height, b.class_id)
             for b, (x, y), dy in zip(scene.gt_boxes, centers, dyaw)]
    return boxes, c, d


def perturb(scene: SceneSample, noise: NoiseModel, seed=0) -> SceneSample:
    """Scene with noisy predictions (boxes and their center/depth components)."""
    rng = np.random.default_rng(seed)
    boxes, c, d = _draw(scene, noise, rng)
    return SceneSample(camera=scene.camera, gt_boxes=scene.gt_boxes, pred_boxes=boxes,
                       pred_centers_px=c, pred_depths=d, reg_targets=scene.reg_targets)


def corrupt_targets(scene: SceneSample, noise: NoiseModel, seed=0) -> SceneSample:
    """Same scene with regression supervision replaced by a noisy copy of the truth."""
    rng = np.random.default_rng(seed)
    boxes, _, _ = _draw(scene, noise, rng)
    return SceneSample(camera=scene.camera, gt_boxes=scene.gt_boxes, pred_boxes=scene.pred_boxes,
                       pred_centers_px=scene.pred_centers_px, pred_depths=scene.pred_depths,
                       reg_targets=boxes)


@dataclass
class ProposalSet:
    """``k`` candidate boxes per ground-truth object with scores and IoUs (N, k)."""

    scene: SceneSample
    candidates: list
    scores: np.ndarray
    ious: np.ndarray

    @property
    def k(self):
        return self.scores.shape[1]


def make_proposals(scene: SceneSample, noise: NoiseModel, k: int, seed=0,
                   score_alpha: float = 1.0, score_noise: float = 0.05) -> ProposalSet:
    """Draw ``k`` perturbed candidates per object.

    The pseudo classification score is ``exp(-score_alpha * |offset|)`` plus
    Gaussian noise, clipped to [0, 1], so it tracks quality imperfectly.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = np.random.default_rng(seed)
    n = scene.n_objects
    draws = [_draw(scene, noise, rng)[0] for _ in range(k)]
    candidates = [[draws[j][i] for j in range(k)] for i in range(n)]
    scores = np.empty((n, k))
    ious = np.empty((n, k))
    for i, gt in enumerate(scene.gt_boxes):
        for j, cand in enumerate(candidates[i]):
            off = center_error(gt, cand)
            scores[i, j] = math.exp(-score_alpha * off) + rng.normal(0.0, score_noise)
            ious[i, j] = rotated_bev_iou(gt, cand)
    return ProposalSet(scene, candidates, np.clip(scores, 0.0, 1.0), ious)


class Policy(str, Enum):
    HIGHEST_SCORE = "highest_score"
    HIGHEST_IOU = "highest_iou"
    AVERAGE = "average"


def average_box(boxes) -> Box3D:
    """Coordinate-wise mean box; yaw is the circular mean."""
    arr = np.array([[b.center_x, b.center_y, b.length, b.width, b.height] for b in boxes])
    m = arr.mean(axis=0)
    yaw = math.atan2(np.mean([math.sin(b.yaw) for b in boxes]),
                     np.mean([math.cos(b.yaw) for b in boxes]))
    return Box3D(m[0], m[1], yaw, m[2], m[3], m[4], boxes[0].class_id)


def select_representative(proposals: ProposalSet, policy) -> SceneSample:
    """One prediction per object chosen from its candidates by ``policy``."""
    policy = Policy(policy)
    chosen = []
    for i, cands in enumerate(proposals.candidates):
        if policy is Policy.HIGHEST_SCORE:
            chosen.append(cands[int(np.argmax(proposals.scores[i]))])
        elif policy is Policy.HIGHEST_IOU:
            chosen.append(cands[int(np.argmax(proposals.ious[i]))])
        else:
            chosen.append(average_box(cands))
    scene = proposals.scene
    centers = np.array([b.center for b in chosen])
    return SceneSample(camera=scene.camera, gt_boxes=scene.gt_boxes, pred_boxes=chosen,
                       pred_centers_px=project_points(scene.camera, centers),
                       pred_depths=camera_depth(scene.camera, centers),
                       reg_targets=scene.reg_targets)


@dataclass(frozen=True)
class OptimSpec:
    """Plain gradient descent settings.

    ``variables="bev"`` moves the predicted box centers; ``"components"``
    moves the predicted center pixels and depths (required for replicated
    losses).  Losses are averaged per point and divided by the object count,
    so with ``scale_by_objects`` the step is multiplied by N**2 to keep a
    unit step meaningful regardless of scene size.  Pixel steps default to
    ``step_size * (fx / depth)**2`` per object, the meters-to-pixels
    conversion at that object's initial depth.
    """

    loss: LossConfig = LossConfig()
    steps: int = 200
    step_size: float = 1.0
    variables: str = "bev"
    scale_by_objects: bool = True
    pixel_step_size: float | None = None

    def __post_init__(self):
        if self.steps < 0 or not self.step_size > 0:
            raise ValueError("steps must be >= 0 and step_size > 0")
        if self.variables not in ("bev", "components"):
            raise ValueError(f"variables must be 'bev' or 'components', got {self.variables!r}")
        if self.loss.replicate and self.variables != "components":
            raise ValueError("replicated losses optimize the (center, depth) components")


@dataclass
class OptimRun:
    spec: OptimSpec
    loss_trace: np.ndarray
    error_trace: np.ndarray      # (steps, N) center error at the start of each step
    initial_errors: np.ndarray
    final_errors: np.ndarray
    final_boxes: list
    skipped_steps: int = 0
    diverged: bool = False


def _errors(gt_boxes, boxes):
    return np.array([center_error(g, b) for g, b in zip(gt_boxes, boxes)])


def optimize(scene: SceneSample, spec: OptimSpec) -> OptimRun:
    """Descend ``total_loss`` on the scene's predictions; ground truth is untouched.

    Raises:
        DivergedRun: if the loss or its gradient becomes non-finite; the
            partial run is attached to the exception.
    """
    if scene.pred_boxes is None:
        raise ValueError("scene has no predictions to optimize")
    n = scene.n_objects
    scale = n * n if spec.scale_by_objects else 1.0
    eta = spec.step_size * scale
    boxes = list(scene.pred_boxes)
    gt = scene.gt_boxes
    if spec.variables == "components":
        c = np.array(scene.pred_centers_px, dtype=float)
        d = np.array(scene.pred_depths, dtype=float)
        if spec.pixel_step_size is None:
            fx = scene.camera.K[0, 0]
            eta_px = eta * (fx / d) ** 2
        else:
            eta_px = np.full(n, spec.pixel_step_size * scale)
        boxes = boxes_from_components(scene.camera, boxes, c, d)

    loss_trace = np.zeros(spec.steps)
    error_trace = np.zeros((spec.steps, n))
    initial = _errors(gt, boxes)
    skipped = 0

    def partial(upto, diverged):
        return OptimRun(spec, loss_trace[:upto].copy(), error_trace[:upto].copy(), initial,
                        _errors(gt, boxes), list(boxes), skipped, diverged)

    for it in range(spec.steps):
        error_trace[it] = _errors(gt, boxes)
        if spec.variables == "bev":
            current = SceneSample(scene.camera, gt, boxes, reg_targets=scene.reg_targets)
        else:
            current = SceneSample(scene.camera, gt, boxes, pred_centers_px=c, pred_depths=d,
                                  reg_targets=scene.reg_targets)
        rep = total_loss(current, spec.loss, step=it)
        loss_trace[it] = rep.value
        if "homography_skipped" in rep.info:
            skipped += 1
        grads = list(rep.grads.values())
        if not math.isfinite(rep.value) or not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergedRun(f"non-finite loss at step {it}", run=partial(it + 1, True))
        if spec.variables == "bev":
            centers = np.array([b.center for b in boxes]) - eta * point_grad_to_centers(rep.grads["points"])
            boxes = [b.moved_to(x, y) for b, (x, y) in zip(boxes, centers)]
        else:
            if "points" in rep.grads:
                g_c, g_d = points_grad_to_components(scene.camera, c, d, rep.grads["points"])
            else:
                g_c, g_d = rep.grads["centers_px"], rep.grads["depths"]
            c = c - eta_px[:, None] * g_c
            d = d - eta * g_d
            try:
                boxes = boxes_from_components(scene.camera, boxes, c, d)
            except ValueError as exc:
                raise DivergedRun(f"step {it}: {exc}", run=partial(it + 1, True)) from exc
    return partial(spec.steps, False)
