"""Acceptance suite: one check per criterion, each at its stated tolerance.

Run with pytest (a PASS/FAIL line per criterion is printed in the terminal
summary) or directly: ``python tests/test_acceptance.py``.

Set ``HOMOLOSS_KITTI_DIR`` to a directory holding ``label_2/`` and ``calib/``
from the KITTI object benchmark to include real annotations in criterion 7.
"""

import math
import os
import sys
import tempfile
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from conftest import random_box, random_camera, random_homography  # noqa: E402
from kitti_synth import DATA, calib_text, p2, write_sample  # noqa: E402

from homoloss.experiment import load_config, run_experiment  # noqa: E402
from homoloss.geometry import (  # noqa: E402
    Box3D,
    bottom_points,
    camera_depth,
    project_points,
    stack_bottom_points,
)
from homoloss.gradcheck import run_gradcheck  # noqa: E402
from homoloss.homography import apply_homography, estimate_homography  # noqa: E402
from homoloss.kitti_io import (  # noqa: E402
    camera_frame_bottom_points,
    evaluate_frames,
    parse_calib,
    parse_labels,
    project_with_p2,
    read_labels,
    serialize_labels,
    to_ground_frame,
)
from homoloss.loss import (  # noqa: E402
    TYPE1,
    TYPE2,
    LossConfig,
    SceneSample,
    homography_loss,
    homography_loss_points,
    projection_loss_points,
    regression_loss,
    smooth_l1,
    total_loss,
)
from homoloss.metrics import box_polygon, rotated_bev_iou  # noqa: E402
from homoloss.scene_sim import SceneGenParams, generate_scene, perturb, NoiseModel  # noqa: E402

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RESULTS = {}


def record(key, title, passed, detail):
    RESULTS[key] = (title, bool(passed), detail)
    return bool(passed), detail


# 1 ---------------------------------------------------------------------------

def criterion_1():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_reproj = worst_loss = 0.0
    for _ in range(200):
        cam = random_camera(rng)
        boxes = []
        while len(boxes) < int(rng.integers(2, 7)):
            b = random_box(rng, depth=(5.0, 50.0), lateral=(-10.0, 10.0))
            if np.all(camera_depth(cam, bottom_points(b)) > 1.0):
                boxes.append(b)
        Q = stack_bottom_points(boxes)
        q = project_points(cam, Q)
        H = estimate_homography(q, Q)
        worst_reproj = max(worst_reproj, np.linalg.norm(apply_homography(H, q) - Q, axis=1).max())
        scene = SceneSample(cam, boxes, boxes)
        for mode in (TYPE1, TYPE2):
            rep = homography_loss(scene, LossConfig(mode=mode))
            worst_loss = max(worst_loss, math.inf if rep.skipped else rep.value)
    dt = time.perf_counter() - t0
    ok = worst_reproj < 1e-8 and worst_loss < 1e-10 and dt < 5.0
    return record(1, "exact homography recovery", ok,
                  f"max reprojection {worst_reproj:.2e} m, max loss at truth {worst_loss:.2e}, {dt:.2f} s")


# 2 ---------------------------------------------------------------------------

def criterion_2():
    t0 = time.perf_counter()
    summary = run_gradcheck(seed=2, scenes=50, tol=1e-4, step=1e-6)
    dt = time.perf_counter() - t0
    names = set(summary.max_by_loss())
    required = {"regression_l1", "projection", "homography_type1", "homography_type2",
                "replicated_type1", "replicated_type2"}
    ok = summary.passed and required <= names and dt < 60.0
    return record(2, "gradient correctness", ok,
                  f"max relative error {summary.max_error:.2e} over {len(names)} losses, "
                  f"{summary.n_skipped} skipped, {dt:.1f} s")


# 3 ---------------------------------------------------------------------------

def criterion_3():
    h = 1e-6
    max_homo = max_proj = 0.0
    for seed in (0, 1, 2):
        scene = generate_scene(SceneGenParams(seed=seed, n_boxes=(3, 5)))
        scene = perturb(scene, NoiseModel(0.3, 0.01), seed=[seed, 1])
        cam, gt, pred = scene.camera, scene.gt_points, scene.pred_points
        n = scene.n_objects
        g_h0 = homography_loss_points(cam, gt, pred, TYPE1).grads["points"]
        g_p0 = projection_loss_points(cam, gt, pred).grads["points"]
        for j in range(n):
            for axis in (0, 1):
                moved = pred.copy()
                moved[5 * j:5 * j + 5, axis] += h
                g_h = homography_loss_points(cam, gt, moved, TYPE1).grads["points"]
                g_p = projection_loss_points(cam, gt, moved).grads["points"]
                for i in range(n):
                    if i == j:
                        continue
                    sl = slice(5 * i, 5 * i + 5)
                    max_homo = max(max_homo, np.abs(g_h[sl] - g_h0[sl]).max() / h)
                    max_proj = max(max_proj, np.abs(g_p[sl] - g_p0[sl]).max() / h)
    ok = max_homo > 1e-8 and max_proj <= 1e-12
    return record(3, "global coupling contrast", ok,
                  f"max cross-object derivative: homography {max_homo:.2e}, projection {max_proj:.1e}")


# 4 ---------------------------------------------------------------------------

def criterion_4():
    rng = np.random.default_rng(4)
    worst = {"collinearity": 0.0, "similarity": 0.0, "permutation": 0.0, "gauge": 0.0}
    for _ in range(100):
        H = random_homography(rng)
        a, b = rng.uniform(-3, 3, 2), rng.uniform(-3, 3, 2)
        pts = np.array([a, b, a + rng.uniform(-2, 2) * (b - a)])
        q = apply_homography(H, pts)
        d1, d2 = q[1] - q[0], q[2] - q[0]
        worst["collinearity"] = max(worst["collinearity"],
                                    abs(d1[0] * d2[1] - d1[1] * d2[0]) / (np.linalg.norm(d1) * np.linalg.norm(d2)))

        src = rng.uniform(-5, 5, (10, 2))
        dst = apply_homography(random_homography(rng), src) + rng.normal(0, 0.05, (10, 2))
        H1 = estimate_homography(src, dst)
        th, s, t = rng.uniform(-math.pi, math.pi), rng.uniform(0.2, 5), rng.uniform(-10, 10, 2)
        S = s * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        H2 = estimate_homography(src, dst @ S.T + t)
        worst["similarity"] = max(worst["similarity"],
                                  np.abs(apply_homography(H2, src) - (apply_homography(H1, src) @ S.T + t)).max())

        perm = rng.permutation(10)
        H3 = estimate_homography(src[perm], dst[perm])
        worst["permutation"] = max(worst["permutation"],
                                   np.abs(apply_homography(H3, src) - apply_homography(H1, src)).max())

        base = apply_homography(H1, src)
        for scale in (1e-6, -3.0, 1e6):
            rel = np.abs(apply_homography(scale * H1, src) - base).max() / np.abs(base).max()
            worst["gauge"] = max(worst["gauge"], rel)
    ok = (worst["collinearity"] < 1e-8 and worst["similarity"] < 1e-8
          and worst["permutation"] < 1e-10 and worst["gauge"] < 1e-14)
    return record(4, "geometric properties", ok,
                  ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (100 instances each)")


# 5 ---------------------------------------------------------------------------

def criterion_5():
    cfg = load_config(os.path.join(ROOT, "configs", "depth_range.json"))
    lam = {l.name: l.loss for l in cfg.losses}
    setup_ok = (len(cfg.seeds) >= 20 and lam["reg"].lambda_homo == 0.0
                and lam["reg+homo"].lambda_homo == 0.2
                and lam["reg"].lambda_reg == lam["reg+homo"].lambda_reg == 2.0
                and cfg.target_noise.bias_per_meter[1] > 0 and cfg.prediction_noise.sigma_per_meter > 0)
    t0 = time.perf_counter()
    res = run_experiment(cfg)
    dt = time.perf_counter() - t0
    c = res.comparison("reg")["reg+homo"]
    base = np.nanmean(res.far_errors["reg"])
    homo = np.nanmean(res.far_errors["reg+homo"])
    ok = (setup_ok and not res.diverged and homo < base
          and c["mean_improvement"] > c["standard_error"] and dt < 300.0)
    return record(5, "depth-range experiment direction", ok,
                  f"far-bin error {base:.3f} -> {homo:.3f} m, improvement {c['mean_improvement']:.3f} "
                  f"+- {c['standard_error']:.4f} (SE, {c['n_seeds']} seeds), {dt:.1f} s")


# 6 ---------------------------------------------------------------------------

def criterion_6():
    spots = smooth_l1(0.0, 1.0) == 0.0 and smooth_l1(0.5, 1.0) == 0.125 and smooth_l1(2.0, 1.0) == 1.5
    scene = generate_scene(SceneGenParams(seed=6))
    scene = perturb(scene, NoiseModel(0.4, 0.02), seed=[6, 1])
    n = scene.n_objects
    reg = regression_loss(scene)
    homo = homography_loss(scene, LossConfig())
    cfg = LossConfig(lambda_reg=2.0, lambda_homo=0.2, warmup_steps=10)
    gated = all(total_loss(scene, cfg, s).value == 2.0 * reg.value / n
                and not total_loss(scene, cfg, s).info["homography_active"] for s in range(10))
    after = total_loss(scene, cfg, 10)
    weighted = (after.value == 2.0 * reg.value / n + 0.2 * homo.value / n
                and np.array_equal(after.grads["points"],
                                   2.0 * reg.grads["points"] / n + 0.2 * homo.grads["points"] / n))
    ok = spots and gated and weighted
    return record(6, "loss arithmetic", ok, f"spot values {spots}, warmup gate {gated}, weighted total {weighted}")


# 7 ---------------------------------------------------------------------------

def criterion_7():
    details = []
    # golden files: parse, round-trip
    rt = True
    for name in sorted(os.listdir(os.path.join(DATA, "label_2"))):
        recs = read_labels(os.path.join(DATA, "label_2", name))
        rt &= parse_labels(serialize_labels(recs)) == recs
    details.append(f"golden round-trip {rt}")
    # frame conversion vs direct P2
    P = p2()
    worst = 0.0
    for name in sorted(os.listdir(os.path.join(DATA, "label_2"))):
        for r in read_labels(os.path.join(DATA, "label_2", name)):
            if not r.usable():
                continue
            cam = parse_calib(calib_text(), camera_height=r.location[1])
            pts = camera_frame_bottom_points(r)
            if np.any(pts[:, 2] <= 0.5):
                continue
            a = project_points(cam, bottom_points(to_ground_frame(r, r.location[1])))
            worst = max(worst, np.abs(a - project_with_p2(P, pts)).max())
    details.append(f"P2 agreement {worst:.1e} px")
    # no crash on a sample; real KITTI if provided
    real = os.environ.get("HOMOLOSS_KITTI_DIR")
    if real:
        res = evaluate_frames(os.path.join(real, "label_2"), os.path.join(real, "calib"))
        where = "real sample"
    else:
        tmp = tempfile.mkdtemp()
        lab, cal = write_sample(tmp, n_frames=20)
        res = evaluate_frames(lab, cal)
        where = "synthetic sample (no real KITTI dir given)"
    finite = all(math.isfinite(v) for v in res["max_loss_at_truth"].values())
    details.append(f"{where}: {res['n_frames']} frames, skip rate {res['skip_rate']:.3f}, "
                   f"loss at truth finite {finite}, bbox consistency {res['bbox_consistency']:.2f}")
    ok = rt and worst < 1e-6 and finite
    return record(7, "KITTI ingestion", ok, "; ".join(details))


# 8 ---------------------------------------------------------------------------

def _inside(box, p):
    d = p - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = d[:, 0] * c + d[:, 1] * s
    v = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(u) <= box.length / 2) & (np.abs(v) <= box.width / 2)


def criterion_8():
    from scipy.stats import qmc

    rng = np.random.default_rng(8)
    worst_axis = 0.0
    for _ in range(200):
        a = Box3D(*rng.uniform(-3, 3, 2), 0.0, *rng.uniform(0.5, 5, 3))
        b = Box3D(*rng.uniform(-3, 3, 2), 0.0, *rng.uniform(0.5, 5, 3))
        ix = max(0.0, min(a.center_x + a.length / 2, b.center_x + b.length / 2)
                 - max(a.center_x - a.length / 2, b.center_x - b.length / 2))
        iy = max(0.0, min(a.center_y + a.width / 2, b.center_y + b.width / 2)
                 - max(a.center_y - a.width / 2, b.center_y - b.width / 2))
        inter = ix * iy
        exact = inter / (a.length * a.width + b.length * b.width - inter)
        worst_axis = max(worst_axis, abs(rotated_bev_iou(a, b) - exact))

    worst_mc = 0.0
    pairs = 0
    while pairs < 50:
        a = random_box(rng, depth=(0, 2.5), lateral=(-1.5, 1.5))
        b = random_box(rng, depth=(0, 2.5), lateral=(-1.5, 1.5))
        iou = rotated_bev_iou(a, b)
        if iou == 0.0:
            continue
        pts = np.vstack([box_polygon(a), box_polygon(b)])
        lo, hi = pts.min(0), pts.max(0)
        u = qmc.Sobol(d=2, scramble=True, seed=int(rng.integers(2**31))).random_base2(20)
        p = lo + u * (hi - lo)
        ia, ib = _inside(a, p), _inside(b, p)
        worst_mc = max(worst_mc, abs((ia & ib).sum() / (ia | ib).sum() - iou))
        pairs += 1
    ok = worst_axis < 1e-12 and worst_mc < 1e-3
    return record(8, "rotated BEV IoU", ok,
                  f"axis-aligned max error {worst_axis:.1e}, Monte-Carlo (2^20 Sobol points) "
                  f"max error {worst_mc:.1e} over 50 overlapping pairs")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4,
            criterion_5, criterion_6, criterion_7, criterion_8]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 9)])
def test_acceptance(criterion):
    k = CRITERIA.index(criterion) + 1
    try:
        ok, detail = criterion()
    except Exception as exc:
        record(k, criterion.__name__, False, f"{type(exc).__name__}: {exc}")
        raise
    assert ok, detail


def summary_lines():
    return [f"[{'PASS' if ok else 'FAIL'}] {k}. {title}: {detail}"
            for k, (title, ok, detail) in sorted(RESULTS.items())]


if __name__ == "__main__":
    for k, crit in enumerate(CRITERIA, start=1):
        try:
            crit()
        except Exception as exc:  # report and keep going
            record(k, crit.__name__, False, f"{type(exc).__name__}: {exc}")
        title, ok, detail = RESULTS[k]
        print(f"[{'PASS' if ok else 'FAIL'}] {k}. {title}: {detail}", flush=True)
    sys.exit(0 if all(ok for _, ok, _ in RESULTS.values()) else 1)
