"""Central-difference verification of every analytic loss gradient."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import stack_bottom_points
from .loss import (
    TYPE1,
    TYPE2,
    LossConfig,
    SceneSample,
    homography_loss_points,
    projection_loss_points,
    regression_loss_points,
    replicated_homography_loss,
    total_loss,
)
from .scene_sim import NoiseModel, SceneGenParams, generate_scene, perturb

FD_STEP = 1e-6
# gradients this small count as zero; relative error is then measured in absolute terms
GRAD_FLOOR = 1e-10


def central_difference(f, x, step: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at array ``x`` (same shape as ``x``)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def relative_error(analytic, numeric, floor: float = GRAD_FLOOR) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def random_scene(rng, n_boxes=(2, 10)) -> SceneSample:
    """Random camera pose and scene with noisy predictions in both representations."""
    seed = int(rng.integers(2**31))
    params = SceneGenParams(
        n_boxes=n_boxes,
        depth_range=(6.0, 45.0),
        camera_height=float(rng.uniform(1.4, 1.9)),
        pitch=float(rng.uniform(-0.03, 0.03)),
        seed=seed,
    )
    scene = generate_scene(params)
    noise = NoiseModel(sigma_base=0.3, sigma_per_meter=0.02, sigma_yaw=0.05)
    scene = perturb(scene, noise, seed=[seed, 1])
    targets = perturb(scene, NoiseModel(sigma_base=0.2, sigma_per_meter=0.01), seed=[seed, 2])
    return SceneSample(camera=scene.camera, gt_boxes=scene.gt_boxes, pred_boxes=scene.pred_boxes,
                       pred_centers_px=scene.pred_centers_px, pred_depths=scene.pred_depths,
                       reg_targets=targets.pred_boxes)


@dataclass
class CheckResult:
    name: str
    error: float
    skipped: bool = False
    reason: str = ""


def _point_check(name, fn, pred_pts, step):
    rep = fn(pred_pts)
    if rep.skipped:
        return CheckResult(name, 0.0, True, rep.reason or "")
    num = central_difference(lambda p: fn(p).value, pred_pts, step)
    return CheckResult(name, relative_error(rep.grads["points"], num))


def check_scene(scene: SceneSample, step: float = FD_STEP) -> list:
    """Relative gradient error of every loss on one scene."""
    cam = scene.camera
    gt = scene.gt_points
    pred = scene.pred_points
    target = scene.target_points
    out = [
        _point_check("regression_l1", lambda p: regression_loss_points(target, p, "l1"), pred, step),
        _point_check("regression_smooth_l1",
                     lambda p: regression_loss_points(target, p, "smooth_l1"), pred, step),
        _point_check("projection", lambda p: projection_loss_points(cam, gt, p), pred, step),
        _point_check("homography_type1", lambda p: homography_loss_points(cam, gt, p, TYPE1), pred, step),
        _point_check("homography_type2", lambda p: homography_loss_points(cam, gt, p, TYPE2), pred, step),
    ]

    for mode in (TYPE1, TYPE2):
        cfg = LossConfig(mode=mode)
        rep = replicated_homography_loss(scene, cfg)
        name = f"replicated_{mode}"
        if rep.skipped:
            out.append(CheckResult(name, 0.0, True, rep.reason or ""))
            continue
        c0, d0 = scene.pred_centers_px, scene.pred_depths
        f_c = lambda c: replicated_homography_loss(  # noqa: E731
            scene.with_predictions(scene.pred_boxes, pred_centers_px=c), cfg).value
        f_d = lambda d: replicated_homography_loss(  # noqa: E731
            scene.with_predictions(scene.pred_boxes, pred_depths=d), cfg).value
        num_c = central_difference(f_c, c0, step)
        num_d = central_difference(f_d, d0, step)
        out.append(CheckResult(name, relative_error(
            np.concatenate([rep.grads["centers_px"].ravel(), rep.grads["depths"]]),
            np.concatenate([num_c.ravel(), num_d]))))

    for mode in (TYPE1, TYPE2):
        cfg = LossConfig(mode=mode, reg_loss="smooth_l1")
        rep = total_loss(scene, cfg)
        name = f"total_{mode}"
        if rep.info.get("homography_skipped"):
            out.append(CheckResult(name, 0.0, True, rep.info["homography_skipped"]))
            continue
        # the total is a function of box centers; bottom points move rigidly with them
        centers0 = np.array([b.center for b in scene.pred_boxes])

        def f(centers):
            boxes = [b.moved_to(x, y) for b, (x, y) in zip(scene.pred_boxes, centers)]
            return total_loss(scene.with_predictions(boxes), cfg).value

        num = central_difference(f, centers0, step)
        g = rep.grads["points"].reshape(-1, 5, 2).sum(axis=1)
        out.append(CheckResult(name, relative_error(g, num)))
    return out


@dataclass
class GradcheckSummary:
    tol: float
    n_scenes: int
    results: list = field(default_factory=list)   # (scene index, CheckResult)

    @property
    def max_error(self) -> float:
        errs = [r.error for _, r in self.results if not r.skipped]
        return max(errs) if errs else 0.0

    def max_by_loss(self) -> dict:
        out = {}
        for _, r in self.results:
            if not r.skipped:
                out[r.name] = max(out.get(r.name, 0.0), r.error)
        return out

    @property
    def n_skipped(self) -> int:
        return sum(r.skipped for _, r in self.results)

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_error) and self.max_error < self.tol

    def failures(self):
        return [(i, r) for i, r in self.results if not r.skipped and not r.error < self.tol]


def run_gradcheck(seed: int = 0, scenes: int = 50, tol: float = 1e-4,
                  step: float = FD_STEP) -> GradcheckSummary:
    rng = np.random.default_rng(seed)
    summary = GradcheckSummary(tol=tol, n_scenes=scenes)
    for i in range(scenes):
        scene = random_scene(rng)
        summary.results.extend((i, r) for r in check_scene(scene, step))
    return summary
