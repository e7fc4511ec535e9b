"""Plane-to-plane homography by normalized DLT, with gradients through the solve.

The estimate is the right singular vector of the 2n x 9 DLT matrix belonging
to the smallest singular value, computed on isotropically normalized points
and mapped back.  The returned matrix is gauge fixed: unit Frobenius norm,
sign chosen so the first source point has a positive homogeneous scale.

:func:`estimate_homography_backward` differentiates the whole pipeline
(normalization, DLT assembly, smallest eigenvector of ``A^T A``, denormalization
and gauge fix) with respect to every source and target coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfiguration,
    IllConditionedGradient,
    VanishingHomogeneousScale,
)

EPS_COND = 1e-6
EPS_GAP = 1e-9
EPS_W = 1e-12
EPS_COLLINEAR = 1e-9
EPS_DUPLICATE = 1e-9

SQRT2 = math.sqrt(2.0)


def _as_points(pts, name):
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"{name} must have shape (n, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return pts


def check_correspondences(src, dst):
    """Validate a correspondence set and return it as float arrays."""
    src = _as_points(src, "sources")
    dst = _as_points(dst, "targets")
    if len(src) != len(dst):
        raise ValueError(f"{len(src)} sources vs {len(dst)} targets")
    if len(src) < 4:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {len(src)}")
    d = np.sqrt(((src[:, None, :] - src[None, :, :]) ** 2).sum(-1))
    d[np.diag_indices(len(src))] = np.inf
    if d.min() < EPS_DUPLICATE:
        i, j = np.unravel_index(np.argmin(d), d.shape)
        raise DegenerateConfiguration(f"source points {i} and {j} coincide")
    return src, dst


def hartley_normalize(pts):
    """Isotropic normalization: centroid to origin, mean distance sqrt(2).

    Returns ``(normalized, scale, centroid)``; the transform is
    ``normalized = scale * (pts - centroid)``.
    """
    m = pts.mean(axis=0)
    dist = np.sqrt(((pts - m) ** 2).sum(axis=1))
    mean_dist = dist.mean()
    if mean_dist <= 0:
        raise DegenerateConfiguration("all points coincide")
    k = SQRT2 / mean_dist
    return k * (pts - m), k, m


def similarity_matrix(scale, centroid):
    return np.array([[scale, 0.0, -scale * centroid[0]],
                     [0.0, scale, -scale * centroid[1]],
                     [0.0, 0.0, 1.0]])


def dlt_matrix(src, dst):
    """The 2n x 9 DLT system for ``dst ~ H src`` (row-major vec(H))."""
    n = len(src)
    x, y = src[:, 0], src[:, 1]
    X, Y = dst[:, 0], dst[:, 1]
    one, zero = np.ones(n), np.zeros(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.column_stack([zero, zero, zero, -x, -y, -one, Y * x, Y * y, Y])
    A[1::2] = np.column_stack([x, y, one, zero, zero, zero, -X * x, -X * y, -X])
    return A


def _collinear(normalized):
    s = np.linalg.svd(normalized, compute_uv=False)
    return s[-1] <= EPS_COLLINEAR * s[0]


@dataclass
class _Solve:
    src: np.ndarray
    dst: np.ndarray
    src_n: np.ndarray
    dst_n: np.ndarray
    ks: float
    ms: np.ndarray
    kd: float
    md: np.ndarray
    A: np.ndarray
    sv: np.ndarray   # all 9 singular values, descending (zero padded)
    V: np.ndarray    # 9 x 9, columns are right singular vectors
    Hn: np.ndarray
    raw_norm: float
    sign: float
    H: np.ndarray


def _solve(src, dst):
    src, dst = check_correspondences(src, dst)
    src_n, ks, ms = hartley_normalize(src)
    dst_n, kd, md = hartley_normalize(dst)
    if _collinear(src_n):
        raise DegenerateConfiguration("source points are collinear")
    if _collinear(dst_n):
        raise DegenerateConfiguration("target points are collinear")

    A = dlt_matrix(src_n, dst_n)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    sv = np.zeros(9)
    sv[: len(s)] = s
    if sv[7] <= EPS_COLLINEAR * sv[0] or sv[8] / sv[7] > 1.0 - EPS_COND:
        raise DegenerateConfiguration(
            f"smallest singular values {sv[7]:.3g}, {sv[8]:.3g} do not isolate a solution"
        )
    Hn = Vt[8].reshape(3, 3)

    Ti = np.array([[1.0 / kd, 0.0, md[0]], [0.0, 1.0 / kd, md[1]], [0.0, 0.0, 1.0]])
    H_raw = Ti @ Hn @ similarity_matrix(ks, ms)
    raw_norm = float(np.linalg.norm(H_raw))
    w0 = H_raw[2, :2] @ src[0] + H_raw[2, 2]
    sign = -1.0 if w0 < 0 else 1.0
    H = sign * H_raw / raw_norm
    return _Solve(src, dst, src_n, dst_n, ks, ms, kd, md, A, sv, Vt.T, Hn,
                  raw_norm, sign, H)


def estimate_homography(src, dst) -> np.ndarray:
    """Gauge-fixed homography with ``dst ~ H @ [src, 1]``.

    Args:
        src: (n, 2) points on plane 1, n >= 4, no duplicates.
        dst: (n, 2) corresponding points on plane 2.

    Raises:
        DegenerateConfiguration: fewer than 4 pairs, duplicated or collinear
            points, or a near-repeated smallest singular value.
    """
    return _solve(src, dst).H.copy()


def apply_homography(H, pts) -> np.ndarray:
    """Map points (n, 2) or a single point (2,) through ``H``.

    Raises:
        VanishingHomogeneousScale: if a point's homogeneous scale is below
            ``EPS_W`` (relative to the norm of ``H``).
    """
    H = np.asarray(H, dtype=float)
    p = np.asarray(pts, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    w = p @ H[:, :2].T + H[:, 2]
    bad = np.abs(w[:, 2]) < EPS_W * np.linalg.norm(H)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise VanishingHomogeneousScale(f"point {i} maps to homogeneous scale {w[i, 2]:.3g}")
    out = w[:, :2] / w[:, 2:3]
    return out[0] if single else out


def apply_homography_vjp(H, pts, grad_out):
    """Vector-Jacobian product of :func:`apply_homography`.

    Returns ``(grad_H, grad_pts)`` for an upstream gradient on the mapped points.
    """
    H = np.asarray(H, dtype=float)
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    g = np.atleast_2d(np.asarray(grad_out, dtype=float))
    w = p @ H[:, :2].T + H[:, 2]
    y = w[:, :2] / w[:, 2:3]
    gw = np.empty_like(w)
    gw[:, :2] = g / w[:, 2:3]
    gw[:, 2] = -(g * y).sum(axis=1) / w[:, 2]
    ph = np.column_stack([p, np.ones(len(p))])
    grad_H = gw.T @ ph
    grad_pts = gw @ H[:, :2]
    return grad_H, grad_pts


def _backward(st: _Solve, upstream):
    G = np.asarray(upstream, dtype=float).reshape(3, 3)
    if st.sv[7] - st.sv[8] < EPS_GAP:
        raise IllConditionedGradient(
            f"singular value gap {st.sv[7] - st.sv[8]:.3g} below {EPS_GAP}"
        )

    # gauge fix: H = sign * H_raw / |H_raw|; the scale direction drops out
    g_raw = st.sign * (G - st.H * np.sum(st.H * G)) / st.raw_norm

    # H_raw = Ti @ Hn @ Ts
    Ts = similarity_matrix(st.ks, st.ms)
    Ti = np.array([[1.0 / st.kd, 0.0, st.md[0]], [0.0, 1.0 / st.kd, st.md[1]], [0.0, 0.0, 1.0]])
    g_Hn = Ti.T @ g_raw @ Ts.T
    g_Ts = (Ti @ st.Hn).T @ g_raw
    g_Ti = g_raw @ (st.Hn @ Ts).T

    # smallest eigenvector h of M = A^T A:  dh = -(M - l0)^+ dM h
    h = st.V[:, 8]
    lam = st.sv ** 2
    Vr = st.V[:, :8]
    P = (Vr / (lam[:8] - lam[8])) @ Vr.T
    S = -np.outer(P @ g_Hn.ravel(), h)
    S = 0.5 * (S + S.T)
    g_A = 2.0 * st.A @ S

    # DLT rows -> normalized coordinates
    G1, G2 = g_A[0::2], g_A[1::2]
    x, y = st.src_n[:, 0], st.src_n[:, 1]
    X, Y = st.dst_n[:, 0], st.dst_n[:, 1]
    g_src_n = np.column_stack([
        -G1[:, 3] + Y * G1[:, 6] + G2[:, 0] - X * G2[:, 6],
        -G1[:, 4] + Y * G1[:, 7] + G2[:, 1] - X * G2[:, 7],
    ])
    g_dst_n = np.column_stack([
        -(x * G2[:, 6] + y * G2[:, 7] + G2[:, 8]),
        x * G1[:, 6] + y * G1[:, 7] + G1[:, 8],
    ])

    # normalization parameters (scale k, centroid m) of each point set
    g_ks = np.sum(g_src_n * (st.src - st.ms)) + g_Ts[0, 0] + g_Ts[1, 1] \
        - st.ms[0] * g_Ts[0, 2] - st.ms[1] * g_Ts[1, 2]
    g_ms = -st.ks * g_src_n.sum(axis=0) - st.ks * np.array([g_Ts[0, 2], g_Ts[1, 2]])
    g_kd = np.sum(g_dst_n * (st.dst - st.md)) - (g_Ti[0, 0] + g_Ti[1, 1]) / st.kd ** 2
    g_md = -st.kd * g_dst_n.sum(axis=0) + np.array([g_Ti[0, 2], g_Ti[1, 2]])

    grad_src = st.ks * g_src_n + _normalization_vjp(st.src, st.ms, st.ks, g_ks, g_ms)
    grad_dst = st.kd * g_dst_n + _normalization_vjp(st.dst, st.md, st.kd, g_kd, g_md)
    return grad_src, grad_dst


def _normalization_vjp(pts, m, k, g_k, g_m):
    # k = sqrt(2) / mean_i |p_i - m|,  m = mean_i p_i
    n = len(pts)
    d = pts - m
    r = np.sqrt((d ** 2).sum(axis=1))
    # |p - m| has a kink at the centroid; take the zero subgradient there
    u = np.divide(d, r[:, None], out=np.zeros_like(d), where=r[:, None] > 0)
    mean_dist = SQRT2 / k
    dk_dD = -SQRT2 / mean_dist ** 2
    return (g_k * dk_dD / n) * (u - u.mean(axis=0)) + g_m / n


def estimate_homography_backward(src, dst, upstream):
    """Gradients of a scalar ``L(H)`` with respect to the correspondences.

    ``upstream`` is dL/dH for the gauge-fixed ``H`` returned by
    :func:`estimate_homography`.  Components of ``upstream`` along ``H``
    itself do not contribute, since the gauge removes the scale direction.

    Returns:
        ``(grad_src, grad_dst)``, each of shape (n, 2).

    Raises:
        DegenerateConfiguration: same conditions as the forward solve.
        IllConditionedGradient: if the gap between the two smallest singular
            values is below ``EPS_GAP``.
    """
    return _backward(_solve(src, dst), upstream)


class HomographySolve:
    """A forward solve kept around for a later backward pass.

    >>> solve = HomographySolve(src, dst)      # doctest: +SKIP
    >>> grad_src, grad_dst = solve.backward(dL_dH)  # doctest: +SKIP
    """

    def __init__(self, src, dst):
        self._st = _solve(src, dst)

    @property
    def H(self) -> np.ndarray:
        return self._st.H

    @property
    def singular_values(self) -> np.ndarray:
        return self._st.sv.copy()

    def backward(self, upstream):
        return _backward(self._st, upstream)
