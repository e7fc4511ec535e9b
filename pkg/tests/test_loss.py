import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homoloss.geometry import Box3D, bottom_points, project_points, stack_bottom_points
from homoloss.gradcheck import central_difference, check_scene, random_scene, relative_error
from homoloss.homography import apply_homography
from homoloss.loss import (
    REPLICA_NAMES,
    TYPE1,
    TYPE2,
    LossConfig,
    SceneSample,
    boxes_from_components,
    homography_loss,
    homography_loss_points,
    projection_loss,
    projection_loss_points,
    regression_loss,
    replicated_homography_loss,
    smooth_l1,
    smooth_l1_grad,
    total_loss,
)
from homoloss.scene_sim import SceneGenParams, generate_scene

from conftest import noisy_scene, random_homography


def test_smooth_l1_spot_values():
    assert smooth_l1(0.0, 1.0) == 0.0
    assert smooth_l1(0.5, 1.0) == 0.125
    assert smooth_l1(2.0, 1.0) == 1.5
    assert smooth_l1(-2.0, 1.0) == 1.5


@given(st.floats(0.01, 10))
def test_smooth_l1_c1_at_joint(beta):
    eps = 1e-9 * beta
    lo, hi = smooth_l1(beta - eps, beta), smooth_l1(beta + eps, beta)
    assert abs(hi - lo) < 1e-6 * max(beta, 1)
    assert float(smooth_l1_grad(beta - eps, beta)) == pytest.approx(1.0, abs=1e-6)
    assert float(smooth_l1_grad(beta + eps, beta)) == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(beta=0)
    with pytest.raises(ValueError):
        LossConfig(lambda_homo=-1)
    with pytest.raises(ValueError):
        LossConfig(mode="type3")
    with pytest.raises(ValueError):
        LossConfig(reg_loss="l2")


def test_scene_validation(example_camera):
    box = Box3D(0, 10, 0, 4, 2, 1.5)
    with pytest.raises(ValueError):
        SceneSample(example_camera, [])
    with pytest.raises(ValueError):
        SceneSample(example_camera, [box], pred_boxes=[box, box])
    with pytest.raises(ValueError):
        SceneSample(example_camera, [box.moved_to(0, -10)])


def test_regression_examples(example_camera):
    box = Box3D(0, 10, 0.3, 4, 2, 1.5)
    scene = SceneSample(example_camera, [box], [box])
    assert regression_loss(scene).value == 0.0
    moved = scene.with_predictions([box.moved_to(0.5, 10)])
    assert regression_loss(moved).value == pytest.approx(0.25, abs=1e-15)


def test_regression_brute_force():
    scene = noisy_scene(3)
    total = 0.0
    for g, p in zip(scene.gt_boxes, scene.pred_boxes):
        for a, b in zip(bottom_points(g), bottom_points(p)):
            total += abs(a[0] - b[0]) + abs(a[1] - b[1])
    assert regression_loss(scene).value == pytest.approx(total / (10 * scene.n_objects), rel=1e-13)


def test_projection_zero_at_truth_and_fd():
    scene = noisy_scene(4)
    assert projection_loss(scene.with_predictions(scene.gt_boxes)).value == 0.0
    rep = projection_loss(scene)
    f = lambda p: projection_loss_points(scene.camera, scene.gt_points, p).value  # noqa: E731
    assert relative_error(rep.grads["points"], central_difference(f, scene.pred_points)) < 1e-4


def test_projection_excludes_points_behind_camera(example_camera):
    gt = np.array([[0, 10], [1, 12], [2, 15]], dtype=float)
    pred = gt.copy()
    pred[1] = [1, -3]
    rep = projection_loss_points(example_camera, gt, pred)
    assert rep.info["excluded"] == 1
    assert np.all(rep.grads["points"][1] == 0)
    assert rep.value == 0.0


def test_projection_has_no_cross_object_coupling():
    scene = noisy_scene(5)
    base = projection_loss(scene).grads["points"]
    boxes = list(scene.pred_boxes)
    boxes[1] = boxes[1].moved_to(boxes[1].center_x + 0.7, boxes[1].center_y - 0.4)
    moved = projection_loss(scene.with_predictions(boxes)).grads["points"]
    others = np.r_[0:5, 10:len(base)]
    assert np.array_equal(base[others], moved[others])


@pytest.mark.parametrize("mode", [TYPE1, TYPE2])
def test_homography_zero_at_truth(mode):
    for seed in range(10):
        scene = noisy_scene(seed)
        rep = homography_loss(scene.with_predictions(scene.gt_boxes), LossConfig(mode=mode))
        assert not rep.skipped and rep.value < 1e-10


def test_single_box_type1(example_camera):
    box = Box3D(1.0, 15.0, 0.4, 4.2, 1.7, 1.5)
    pred = Box3D(1.3, 15.6, 0.55, 4.0, 1.8, 1.5)
    scene = SceneSample(example_camera, [box], [pred])
    rep = homography_loss(scene, LossConfig(mode=TYPE1))
    assert not rep.skipped
    assert np.all(np.isfinite(rep.grads["points"]))
    f = lambda p: homography_loss_points(example_camera, scene.gt_points, p, TYPE1).value  # noqa: E731
    assert relative_error(rep.grads["points"], central_difference(f, scene.pred_points)) < 1e-4


def test_single_box_type2_is_identically_zero(example_camera):
    """Four corners fix H, and the center maps to the diagonals' intersection."""
    box = Box3D(1.0, 15.0, 0.4, 4.2, 1.7, 1.5)
    pred = Box3D(1.3, 15.6, 0.55, 4.0, 1.8, 1.5)
    rep = homography_loss(SceneSample(example_camera, [box], [pred]), LossConfig(mode=TYPE2))
    assert not rep.skipped
    assert rep.value < 1e-10
    assert np.abs(rep.grads["points"]).max() < 1e-10


def test_type1_exact_homography_image(rng):
    """If predictions are H' applied to q_gt, the fit reproduces them exactly."""
    scene = noisy_scene(6)
    q_gt = project_points(scene.camera, scene.gt_points)
    for _ in range(5):
        # a homography close to the true image->ground map, so predictions stay plausible
        G_inv = np.linalg.inv(scene.camera.ground_homography)
        Hp = G_inv @ random_homography(rng, 0.01)
        pred = apply_homography(Hp, q_gt)
        rep = homography_loss_points(scene.camera, scene.gt_points, pred, TYPE1)
        direct = smooth_l1(scene.gt_points - pred).sum() / len(pred)
        assert rep.value == pytest.approx(direct, rel=1e-9, abs=1e-12)


def test_global_coupling_fd():
    scene = noisy_scene(7, n_boxes=(3, 3))
    gt = scene.gt_points
    cam = scene.camera

    def grad_i(p):
        return homography_loss_points(cam, gt, p, TYPE1).grads["points"][0:5]

    p0 = scene.pred_points
    p1 = p0.copy()
    p1[5:10] += [0.3, -0.2]    # perturb object 1
    assert np.abs(grad_i(p1) - grad_i(p0)).max() > 1e-8


def test_type1_gradient_only_on_predicted_bev():
    rep = homography_loss(noisy_scene(8), LossConfig(mode=TYPE1))
    assert set(rep.grads) == {"points"}
    rep = homography_loss(noisy_scene(8), LossConfig(mode=TYPE2))
    assert set(rep.grads) == {"pixels", "points"}


@pytest.mark.parametrize("mode", [TYPE1, TYPE2])
def test_permutation_invariant_value(mode, rng):
    scene = noisy_scene(9)
    perm = rng.permutation(scene.n_objects)
    shuffled = SceneSample(scene.camera, [scene.gt_boxes[i] for i in perm],
                           [scene.pred_boxes[i] for i in perm])
    a = homography_loss(scene, LossConfig(mode=mode)).value
    b = homography_loss(shuffled, LossConfig(mode=mode)).value
    assert a == pytest.approx(b, rel=1e-9, abs=1e-14)


def test_degenerate_scene_is_skipped(example_camera):
    box = Box3D(0, 10, 0, 4, 2, 1.5)
    pts = bottom_points(box)
    collinear = np.column_stack([np.linspace(-1, 1, 5), np.full(5, 10.0)])
    rep = homography_loss_points(example_camera, collinear, pts, TYPE1)
    assert rep.skipped and "Degenerate" in rep.reason
    assert rep.grads == {}


def test_all_gradients_fd():
    rng = np.random.default_rng(99)
    for _ in range(5):
        for r in check_scene(random_scene(rng)):
            assert not r.skipped
            assert r.error < 1e-4, r


def _component_scene(seed, perturb_c=True, perturb_d=True):
    scene = noisy_scene(seed)
    scene = scene.with_predictions(scene.gt_boxes)
    c, d = scene.gt_components()
    rng = np.random.default_rng(seed)
    if perturb_c:
        c = c + rng.normal(0, 3.0, c.shape)
    if perturb_d:
        d = d + rng.normal(0, 0.5, d.shape)
    return scene.with_predictions(scene.gt_boxes, pred_centers_px=c, pred_depths=d)


def test_replicated_zero_at_truth():
    rep = replicated_homography_loss(_component_scene(1, False, False))
    assert rep.value < 1e-10


def test_replicated_depth_only():
    rep = replicated_homography_loss(_component_scene(2, perturb_c=False))
    parts = rep.info["replicas"]
    assert parts[REPLICA_NAMES[1]] < 1e-10
    assert parts[REPLICA_NAMES[0]] == pytest.approx(parts[REPLICA_NAMES[2]], rel=1e-12)


def test_replicated_sum_of_standalone_variants():
    scene = _component_scene(3)
    cfg = LossConfig()
    rep = replicated_homography_loss(scene, cfg)
    c_gt, d_gt = scene.gt_components()
    c, d = scene.pred_centers_px, scene.pred_depths
    total = 0.0
    for cc, dd in ((c, d), (c, d_gt), (c_gt, d)):
        boxes = boxes_from_components(scene.camera, scene.pred_boxes, cc, dd)
        total += homography_loss(scene.with_predictions(boxes), cfg).value
    assert rep.value == pytest.approx(total, rel=1e-12)


def test_replicated_needs_components():
    with pytest.raises(ValueError):
        replicated_homography_loss(noisy_scene(1).with_predictions(noisy_scene(1).gt_boxes,
                                                                   pred_centers_px=None))


def test_total_warmup_gate_exact():
    scene = noisy_scene(10)
    cfg = LossConfig(lambda_reg=2.0, lambda_homo=0.2, warmup_steps=5)
    reg = regression_loss(scene).value
    for step in range(5):
        rep = total_loss(scene, cfg, step)
        assert rep.value == 2.0 * reg / scene.n_objects
        assert not rep.info["homography_active"]
    assert total_loss(scene, cfg, 5).info["homography_active"]


def test_total_zero_lambda_never_touches_homography(monkeypatch):
    import homoloss.loss as L

    def boom(*a, **k):
        raise AssertionError("homography evaluated")

    monkeypatch.setattr(L, "homography_loss", boom)
    monkeypatch.setattr(L, "replicated_homography_loss", boom)
    scene = noisy_scene(11)
    rep = total_loss(scene, LossConfig(lambda_homo=0.0), step=10**6)
    assert rep.value == 2.0 * regression_loss(scene).value / scene.n_objects


def test_total_weighted_sum():
    scene = noisy_scene(12)
    cfg = LossConfig(lambda_reg=2.0, lambda_homo=0.2)
    rep = total_loss(scene, cfg)
    reg = regression_loss(scene)
    homo = homography_loss(scene, cfg)
    n = scene.n_objects
    assert rep.value == (2.0 * reg.value / n) + 0.2 * homo.value / n
    assert np.array_equal(rep.grads["points"],
                          2.0 * reg.grads["points"] / n + 0.2 * homo.grads["points"] / n)


def test_total_replicated_grads_on_components():
    scene = _component_scene(13)
    cfg = LossConfig(replicate=True, reg_loss="smooth_l1")
    rep = total_loss(scene, cfg)
    assert set(rep.grads) == {"centers_px", "depths"}
    f = lambda d: total_loss(scene.with_predictions(scene.pred_boxes, pred_depths=d), cfg).value  # noqa: E731
    assert relative_error(rep.grads["depths"], central_difference(f, scene.pred_depths)) < 1e-4


def test_losses_nonnegative_and_finite():
    for seed in range(20):
        scene = noisy_scene(seed, sigma=1.0)
        for mode in (TYPE1, TYPE2):
            rep = homography_loss(scene, LossConfig(mode=mode))
            if not rep.skipped:
                assert rep.value >= 0 and math.isfinite(rep.value)
                assert all(np.all(np.isfinite(g)) for g in rep.grads.values())
