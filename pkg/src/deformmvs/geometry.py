"""Plane hypotheses, plane-induced homographies and pinhole projection.

Depth is the z-depth parametrization: the 3D point seen by pixel p at depth d
is d * Kinv @ (px, py, 1) in the camera frame, which is the point on the
viewing ray whose z coordinate equals d. Normals live in the reference camera
frame and always face the camera (n . ray < 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import DegenerateGeometryError
from .rng import RandomStream
from .scene_io import CameraParams


@dataclass(frozen=True)
class PlaneHypothesis:
    """Per-pixel plane: z-depth plus unit normal in the reference camera frame."""

    depth: float
    normal: np.ndarray  # (3,) float64, unit, camera-facing

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        object.__setattr__(self, "normal", n)
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise ValueError("hypothesis normal must be unit length")
        if not self.depth > 0.0:
            raise ValueError("hypothesis depth must be positive")


@dataclass(frozen=True)
class Homography:
    """3x3 row-major map from reference to source homogeneous pixels."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        object.__setattr__(self, "matrix", m)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))


def viewing_ray(cam: CameraParams, p) -> np.ndarray:
    """Un-normalized viewing ray Kinv @ (px, py, 1) in the camera frame."""
    px, py = float(p[0]), float(p[1])
    return np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0])


def relative_motion(ref_cam: CameraParams, src_cam: CameraParams):
    """(R_j R_i^T, R_j (C_i - C_j)) for reuse across many pixels."""
    r_rel = src_cam.rotation @ ref_cam.rotation.T
    t_rel = src_cam.rotation @ (ref_cam.center - src_cam.center)
    return np.ascontiguousarray(r_rel), np.ascontiguousarray(t_rel)


def compute_homography(ref_cam: CameraParams, src_cam: CameraParams, p,
                       hyp: PlaneHypothesis) -> Homography:
    """Plane-induced homography for the hypothesis plane anchored at pixel p.

    Raises DegenerateGeometryError when the plane passes through the reference
    camera center (zero denominator in the plane-transfer term).
    """
    r_rel, t_rel = relative_motion(ref_cam, src_cam)
    hb = np.empty((3, 3), dtype=np.float64)
    n = hyp.normal
    ok = K.homography_plane(
        hb, ref_cam.fx, ref_cam.fy, ref_cam.cx, ref_cam.cy,
        src_cam.fx, src_cam.fy, src_cam.cx, src_cam.cy,
        r_rel, t_rel, n[0], n[1], n[2],
        float(p[0]), float(p[1]), hyp.depth)
    if not ok:
        raise DegenerateGeometryError("hypothesis plane passes through the camera center")
    return Homography(hb)


def warp_pixel(h: Homography, p) -> np.ndarray:
    """Dehomogenized H @ (px, py, 1); raises on points at infinity."""
    u, v, ok = K.warp_point(h.matrix, float(p[0]), float(p[1]))
    if not ok:
        raise DegenerateGeometryError("warped pixel lies at infinity")
    return np.array([u, v])


def random_hypothesis(rng: RandomStream, p, cam: CameraParams,
                      depth_range: tuple[float, float]) -> PlaneHypothesis:
    """Uniform depth in range, area-uniform camera-facing normal."""
    dmin, dmax = depth_range
    if not (0.0 < dmin < dmax):
        raise ValueError("depth range must satisfy 0 < min < max")
    r = viewing_ray(cam, p)
    state, u = K.sm_uniform(np.uint64(rng.state))
    depth = dmin + (dmax - dmin) * u
    state, nx, ny, nz = K.sample_facing_normal(np.uint64(state), r[0], r[1], r[2])
    rng.state = int(state)
    return PlaneHypothesis(depth, np.array([nx, ny, nz]))


def perturb_hypothesis(rng: RandomStream, hyp: PlaneHypothesis, p, cam: CameraParams,
                       depth_range: tuple[float, float],
                       depth_scale: float, angle_scale: float) -> PlaneHypothesis:
    """Multiplicative (log-space) depth jitter plus bounded normal rotation.

    depth' = depth * exp(u * depth_scale) with u in [-1, 1] (cube-shaped, so
    draws concentrate near the incumbent), clamped to the range; the normal
    rotates by a random axis-angle of at most angle_scale and is re-projected
    onto the camera-facing hemisphere.
    """
    dmin, dmax = depth_range
    r = viewing_ray(cam, p)
    state = np.uint64(rng.state)
    state, u = K.sm_uniform(state)
    depth = hyp.depth * np.exp((2.0 * u - 1.0) ** 3 * depth_scale)
    depth = min(max(depth, dmin), dmax)
    n = hyp.normal
    state, nx, ny, nz = K.perturb_normal(np.uint64(state), n[0], n[1], n[2],
                                         angle_scale, r[0], r[1], r[2])
    rng.state = int(state)
    return PlaneHypothesis(depth, np.array([nx, ny, nz]))


def transfer_hypothesis_depth(hyp_pixel, hyp: PlaneHypothesis, target_pixel,
                              cam: CameraParams) -> float:
    """Depth at target_pixel implied by the plane anchored at hyp_pixel.

    Returns -1.0 when the plane is parallel to the target ray.
    """
    rq = viewing_ray(cam, hyp_pixel)
    rp = viewing_ray(cam, target_pixel)
    n = hyp.normal
    return K.transfer_depth(n[0], n[1], n[2], hyp.depth,
                            rq[0], rq[1], rq[2], rp[0], rp[1], rp[2])
