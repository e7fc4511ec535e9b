"""Ground frame, pinhole camera and bottom-point construction.

Frames
------
Ground frame (right-handed): x lateral (right), y forward (depth), z up.
The ground plane is z = 0 and every box rests on it, so a BEV point is (x, y).

Camera frame: x right, y down, z forward along the optical axis.
A camera is ``X_cam = R @ X_ground + t`` followed by ``K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth

EPS_DEPTH = 1e-6

# ground (x lateral, y forward, z up) -> camera (x right, y down, z forward)
GROUND_TO_CAMERA = np.array(
    [[1.0, 0.0, 0.0],
     [0.0, 0.0, -1.0],
     [0.0, 1.0, 0.0]]
)

# left color camera of the KITTI object benchmark (P2 of most frames)
KITTI_K = np.array(
    [[721.5377, 0.0, 609.5593],
     [0.0, 721.5377, 172.854],
     [0.0, 0.0, 1.0]]
)
KITTI_IMAGE_SIZE = (1242, 375)
KITTI_CAMERA_HEIGHT = 1.65


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.remainder(float(theta), 2.0 * math.pi)
    return math.pi if a <= -math.pi else a


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Box3D:
    """Oriented box resting on the ground plane.

    ``center_x``/``center_y`` locate the bottom-face center in the ground
    frame; ``length`` runs along the heading ``yaw`` and ``width`` across it.
    """

    center_x: float
    center_y: float
    yaw: float
    length: float
    width: float
    height: float
    class_id: str = "Car"

    def __post_init__(self):
        for name in ("center_x", "center_y", "yaw", "length", "width", "height"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"Box3D.{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError(
                f"Box3D dimensions must be positive, got "
                f"l={self.length}, w={self.width}, h={self.height}"
            )
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y])

    def moved_to(self, x: float, y: float) -> "Box3D":
        return Box3D(x, y, self.yaw, self.length, self.width, self.height, self.class_id)


def bottom_offsets(length: float, width: float) -> np.ndarray:
    """Bottom center then the four corners, counter-clockwise from (+l/2, +w/2)."""
    hl, hw = 0.5 * length, 0.5 * width
    return np.array([[0.0, 0.0], [hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])


def bottom_points(box: Box3D) -> np.ndarray:
    """The five BEV candidate points of ``box`` as a (5, 2) array.

    Row 0 is the bottom center; rows 1-4 are the corners
    ``center + Rot(yaw) @ (+-l/2, +-w/2)`` in counter-clockwise order
    starting from the (+l/2, +w/2) offset.
    """
    return box.center + bottom_offsets(box.length, box.width) @ rot2(box.yaw).T


def stack_bottom_points(boxes) -> np.ndarray:
    """Bottom points of several boxes, shape (5 * len(boxes), 2)."""
    if len(boxes) == 0:
        return np.zeros((0, 2))
    return np.concatenate([bottom_points(b) for b in boxes], axis=0)


def point_grad_to_centers(grad_points: np.ndarray) -> np.ndarray:
    """Chain a gradient on stacked bottom points to the box centers.

    Every bottom point translates rigidly with its box center, so the center
    gradient is the sum over the object's five points.
    """
    return np.asarray(grad_points).reshape(-1, 5, 2).sum(axis=1)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera ``q ~ K (R X + t)`` for ground-frame points X."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    _G: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K = np.array(self.K, dtype=float).reshape(3, 3)
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("camera parameters must be finite")
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0:
            raise ValueError("K must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] != 1.0:
            raise ValueError("K needs positive focal entries and K[2,2] = 1")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("R must be a proper rotation")
        for name, v in (("K", K), ("R", R), ("t", t)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        # ground plane z = 0 collapses K [R|t] to a 3x3 homography
        G = K @ np.column_stack([R[:, 0], R[:, 1], t])
        G.setflags(write=False)
        object.__setattr__(self, "_G", G)

    @property
    def ground_homography(self) -> np.ndarray:
        """3x3 matrix mapping homogeneous BEV points (x, y, 1) to pixels."""
        return self._G

    @property
    def center(self) -> np.ndarray:
        """Optical center in the ground frame."""
        return -self.R.T @ self.t


def make_camera(K, height: float, pitch: float = 0.0, roll: float = 0.0,
                lateral: float = 0.0) -> CameraModel:
    """Camera at ``height`` above the ground looking along +y.

    ``pitch`` > 0 tilts the optical axis down toward the ground, ``roll``
    rotates about the optical axis, ``lateral`` shifts the camera along x.
    """
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    Rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    R = Rz @ Rx @ GROUND_TO_CAMERA
    C = np.array([lateral, 0.0, height])
    return CameraModel(K=np.asarray(K, dtype=float), R=R, t=-R @ C)


def kitti_camera(height: float = KITTI_CAMERA_HEIGHT) -> CameraModel:
    return make_camera(KITTI_K, height)


def camera_depth(camera: CameraModel, pts) -> np.ndarray:
    """Camera-frame depth (z) of BEV points; shape (n,)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return pts @ camera.R[2, :2] + camera.t[2]


def _check_depth(depth, where=""):
    bad = np.flatnonzero(~(depth > EPS_DEPTH))
    if bad.size:
        i = int(bad[0])
        raise NonPositiveDepth(
            f"point {i}{where} has camera depth {float(depth[i]):.6g} <= {EPS_DEPTH}"
        )


def project_points(camera: CameraModel, pts) -> np.ndarray:
    """Project BEV points (n, 2) to pixels (n, 2).

    Raises:
        NonPositiveDepth: if any point is within ``EPS_DEPTH`` of the camera
            plane or behind it.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    _check_depth(camera_depth(camera, pts))
    w = pts @ camera._G[:, :2].T + camera._G[:, 2]
    return w[:, :2] / w[:, 2:3]


def project_point(camera: CameraModel, ground_point) -> np.ndarray:
    """Pixel (u, v) of a single BEV point."""
    return project_points(camera, np.reshape(ground_point, (1, 2)))[0]


def projection_jacobian(camera: CameraModel, pts) -> np.ndarray:
    """d(pixel)/d(BEV point) for each point, shape (n, 2, 2)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    G = camera._G
    w = pts @ G[:, :2].T + G[:, 2]
    q = w[:, :2] / w[:, 2:3]
    J = G[None, :2, :2] - q[:, :, None] * G[None, 2:3, :2]
    return J / w[:, 2, None, None]


def backproject_points(camera: CameraModel, pixels, depths) -> np.ndarray:
    """Lift pixels to the given camera depth and drop them onto the BEV plane.

    The 3D point ``depth * K^-1 [u, v, 1]`` is mapped to the ground frame and
    its vertical coordinate discarded. For a pixel that is the image of a
    ground point at its own depth this inverts :func:`project_points`.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    depths = np.atleast_1d(np.asarray(depths, dtype=float))
    _check_depth(depths, " (requested depth)")
    rays = np.column_stack([pixels, np.ones(len(pixels))]) @ np.linalg.inv(camera.K).T
    X_cam = rays * depths[:, None]
    X_ground = (X_cam - camera.t) @ camera.R  # R^T (X - t), row-wise
    return X_ground[:, :2]


def backproject(camera: CameraModel, pixel, depth: float) -> np.ndarray:
    return backproject_points(camera, np.reshape(pixel, (1, 2)), [depth])[0]


def backproject_jacobian(camera: CameraModel, pixels, depths):
    """Partial derivatives of :func:`backproject_points`.

    Returns ``(d_pixel, d_depth)`` with shapes (n, 2, 2) and (n, 2).
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    depths = np.atleast_1d(np.asarray(depths, dtype=float))
    M = (camera.R.T @ np.linalg.inv(camera.K))[:2]  # (2, 3)
    d_pixel = depths[:, None, None] * M[None, :, :2]
    d_depth = np.column_stack([pixels, np.ones(len(pixels))]) @ M.T
    return d_pixel, d_depth
