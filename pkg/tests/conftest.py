import math
import sys

import numpy as np
import pytest

from homoloss.geometry import GROUND_TO_CAMERA, Box3D, CameraModel, make_camera
from homoloss.scene_sim import NoiseModel, SceneGenParams, generate_scene, perturb


@pytest.fixture
def example_camera():
    """f = 700, principal point (600, 200), 1.65 m above the ground."""
    K = np.array([[700.0, 0.0, 600.0], [0.0, 700.0, 200.0], [0.0, 0.0, 1.0]])
    return CameraModel(K=K, R=GROUND_TO_CAMERA, t=np.array([0.0, 1.65, 0.0]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_camera(rng):
    K = np.array([[rng.uniform(500, 900), 0.0, rng.uniform(500, 700)],
                  [0.0, rng.uniform(500, 900), rng.uniform(150, 250)],
                  [0.0, 0.0, 1.0]])
    return make_camera(K, height=rng.uniform(1.2, 2.5), pitch=rng.uniform(-0.1, 0.1),
                       roll=rng.uniform(-0.05, 0.05), lateral=rng.uniform(-1, 1))


def random_box(rng, depth=(8.0, 40.0), lateral=(-8.0, 8.0)):
    return Box3D(rng.uniform(*lateral), rng.uniform(*depth), rng.uniform(-math.pi, math.pi),
                 rng.uniform(3.5, 4.6), rng.uniform(1.5, 1.9), rng.uniform(1.4, 1.7))


def random_homography(rng, scale=0.1):
    H = np.eye(3) + rng.normal(0.0, scale, (3, 3))
    H[2, :2] *= 0.1
    return H


def noisy_scene(seed, n_boxes=(3, 6), sigma=0.3):
    scene = generate_scene(SceneGenParams(n_boxes=n_boxes, depth_range=(8.0, 40.0), seed=seed))
    return perturb(scene, NoiseModel(sigma_base=sigma, sigma_per_meter=0.01, sigma_yaw=0.05),
                   seed=[seed, 1])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
