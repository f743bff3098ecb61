"""Attention-consistent patch deformation around unreliable pixels.

Pipeline per pixel: spoke-search eight rays to the first reliable pixel or
depth edge, re-angle the fan so every sector holds an equal share of reliable
mass, pick four edge-confined anchors per sector (wedge-stratified), filter
them with a RANSAC plane, cluster survivors with DBSCAN, and size each
cluster's sub-patch as window/k to balance attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .rng import RandomStream
from .segprior import BoundaryMap

RAY_COUNT = 8
WEDGES_PER_SECTOR = 4
CLUSTER_CAP = 8


@dataclass
class SectorFan:
    """Eight rays around an unreliable pixel with their terminators."""

    center: tuple[int, int]
    angles: np.ndarray          # (8,) radians, increasing (unwrapped)
    boundary_pixels: np.ndarray  # (8, 2) int terminator per ray
    kinds: np.ndarray           # (8,) 0=reliable, 1=depth_edge, 2=border
    counts: np.ndarray          # (8,) reliable-mass estimate per sector
    empty: bool = False         # no reliable mass anywhere

    @property
    def total_mass(self) -> float:
        return float(self.counts.sum())


@dataclass
class AnchorCluster:
    """Reliable anchors grouped by DBSCAN; sub-patch size is window/k."""

    anchors: list[tuple[int, int]]
    sub_patch_size: int

    @property
    def size(self) -> int:
        return len(self.anchors)


@dataclass
class DeformedPatch:
    """Per-pixel deformation result: clusters plus the flattened anchor set."""

    center: tuple[int, int]
    clusters: list[AnchorCluster] = field(default_factory=list)

    @property
    def anchors(self) -> list[tuple[int, int]]:
        return [a for c in self.clusters for a in c.anchors]

    @property
    def empty(self) -> bool:
        return not self.clusters


def _as_u8(mask: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(mask, dtype=np.uint8)


def initial_angles(n_rays: int = RAY_COUNT, step_deg: float = 45.0) -> np.ndarray:
    return np.arange(n_rays, dtype=np.float64) * math.radians(step_deg)


def spoke_search(p, reliability: np.ndarray, boundary: BoundaryMap,
                 max_radius: int, angles: np.ndarray | None = None) -> SectorFan:
    """Walk the eight rays and estimate each sector's reliable mass.

    A sector's count is the L1 distance between its two terminators when both
    are reliable pixels, else 0 (the sector is cut off by an edge or border).
    """
    if angles is None:
        angles = initial_angles()
    rel = _as_u8(reliability)
    bnd = _as_u8(boundary.mask)
    n = len(angles)
    bx = np.zeros(n, dtype=np.int64)
    by = np.zeros(n, dtype=np.int64)
    kinds = np.zeros(n, dtype=np.uint8)
    counts = np.zeros(n, dtype=np.float64)
    K.fan_walk(rel, bnd, int(p[0]), int(p[1]), np.asarray(angles, np.float64),
               n, max_radius, bx, by, kinds, counts)
    return SectorFan((int(p[0]), int(p[1])), np.asarray(angles, np.float64),
                     np.stack([bx, by], axis=1), kinds, counts,
                     empty=counts.sum() <= 0.0)


def equidistribute(fan: SectorFan, reliability: np.ndarray, boundary: BoundaryMap,
                   max_radius: int, iters: int = 3) -> SectorFan:
    """Iteratively re-place rays so sectors hold equal reliable mass.

    Each pass solves the cumulative-mass interpolation for the new angles,
    re-walks the rays and recounts. A fan with zero total mass is returned
    unchanged with its empty flag set.
    """
    if fan.empty:
        return fan
    cur = fan
    n = len(cur.angles)
    for _ in range(iters):
        out = np.empty(n, dtype=np.float64)
        if not K.equalize_angles(cur.angles, cur.counts, n, out):
            return SectorFan(cur.center, cur.angles, cur.boundary_pixels,
                             cur.kinds, cur.counts, empty=True)
        cur = spoke_search(cur.center, reliability, boundary, max_radius, out)
        if cur.empty:
            return cur
    return cur


class _OffsetShells:
    """All integer offsets within max_radius, angle-sorted per shell (shells
    themselves ordered by distance, so scans stay near-to-far)."""

    def __init__(self, max_radius: int):
        r = max_radius
        ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
        d2 = xs * xs + ys * ys
        keep = (d2 > 0) & (d2 <= r * r)
        xs, ys, d2 = xs[keep], ys[keep], d2[keep]
        ang = np.mod(np.arctan2(ys, xs), 2.0 * np.pi)
        shell = np.floor(np.sqrt(d2)).astype(np.int64)
        order = np.lexsort((ang, shell))
        xs, ys, d2, ang, shell = (xs[order], ys[order], d2[order], ang[order],
                                  shell[order])
        self.odx = np.ascontiguousarray(xs, dtype=np.int64)
        self.ody = np.ascontiguousarray(ys, dtype=np.int64)
        self.oang = np.ascontiguousarray(ang, dtype=np.float64)
        self.d2 = np.ascontiguousarray(d2, dtype=np.float64)
        self.n_shells = r
        self.start = np.zeros(r + 2, dtype=np.int64)
        np.add.at(self.start, shell + 1, 1)
        self.start = np.cumsum(self.start)


_SHELL_CACHE: dict[int, _OffsetShells] = {}


def offset_shells(max_radius: int) -> _OffsetShells:
    if max_radius not in _SHELL_CACHE:
        _SHELL_CACHE[max_radius] = _OffsetShells(max_radius)
    return _SHELL_CACHE[max_radius]


def quadruple_anchors(fan: SectorFan, reliability: np.ndarray,
                      boundary: BoundaryMap, max_radius: int,
                      quality: np.ndarray | None = None,
                      quality_floor: float = 0.0) -> list[list[tuple[int, int]]]:
    """Four wedge-stratified anchors per non-enclosed sector.

    Each sector splits into four equal angular wedges; the anchor is the
    nearest reliable, edge-confined pixel inside each wedge. A sector whose
    bounding ray terminated on a depth edge is treated as enclosed and
    contributes nothing (border-terminated rays merely left the image, so
    those sectors are still scanned); a wedge may come up empty.
    """
    rel = _as_u8(reliability)
    bnd = _as_u8(boundary.mask)
    if quality is None:
        quality = np.ones(rel.shape, dtype=np.float64)
    quality = np.ascontiguousarray(quality, dtype=np.float64)
    shells = offset_shells(max_radius)
    n = len(fan.angles)
    px, py = fan.center
    out: list[list[tuple[int, int]]] = []
    for i in range(n):
        sector: list[tuple[int, int]] = []
        if fan.kinds[i] != 1 and fan.kinds[(i + 1) % n] != 1:
            a0 = fan.angles[i]
            a1 = fan.angles[i + 1] if i + 1 < n else fan.angles[0] + 2.0 * math.pi
            if a1 < a0:
                a1 += 2.0 * math.pi
            wedge = (a1 - a0) / WEDGES_PER_SECTOR
            for k in range(WEDGES_PER_SECTOR):
                x, y, found = K.wedge_anchor(rel, bnd, px, py, a0 + k * wedge,
                                             wedge, shells.odx, shells.ody,
                                             shells.oang, shells.d2,
                                             shells.start, shells.n_shells,
                                             quality, quality_floor)
                if found:
                    sector.append((int(x), int(y)))
        out.append(sector)
    return out


def ransac_plane(points: np.ndarray, epsilon: float, trials: int,
                 rng: RandomStream) -> tuple[np.ndarray, np.ndarray]:
    """Best-of-trials 3-point plane; returns ((nx,ny,nz,d), inlier flags).

    Enumerates all 3-subsets when the trial budget covers them, making small
    instances exact. Raises ValueError below 3 points (caller keeps all
    anchors in that degenerate case).
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if len(pts) < 3:
        raise ValueError("plane fit needs at least 3 points")
    flags = np.zeros(len(pts), dtype=np.uint8)
    nx, ny, nz, d, _ = K.ransac_plane(pts, len(pts), epsilon, trials,
                                      np.uint64(rng.state), flags)
    return np.array([nx, ny, nz, d]), flags.astype(bool)


def dbscan(points, gamma: float, eta: int) -> np.ndarray:
    """Cluster assignment (0..C-1) with every point clustered: core/border
    expansion plus singleton clusters for points unreachable from any core.

    The partition is invariant to input permutation (border points attach to
    their nearest core, coordinate-lexicographic tie break).
    """
    xy = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if len(xy) == 0:
        raise ValueError("dbscan needs at least one point")
    labels = np.zeros(len(xy), dtype=np.int32)
    K.dbscan_labels(xy, len(xy), float(gamma), int(eta), labels)
    return labels


def build_deformed_patch(p, sector_anchors: list[list[tuple[int, int]]],
                         anchor_depths, cam, epsilon: float, gamma: float,
                         eta: int, window_size: int, rng: RandomStream,
                         trials: int = 64,
                         cluster_cap: int = CLUSTER_CAP) -> DeformedPatch:
    """RANSAC-filter the quadrupled anchors, cluster survivors, size clusters.

    anchor_depths maps each anchor pixel to its current depth; anchors are
    lifted to 3D through the camera for planarization. epsilon is the absolute
    plane-distance gate. Returns an empty patch when nothing survives (the
    engine falls back to conventional matching there).
    """
    anchors = [a for sec in sector_anchors for a in sec]
    # drop duplicates while preserving order
    seen = set()
    anchors = [a for a in anchors if not (a in seen or seen.add(a))]
    if not anchors:
        return DeformedPatch((int(p[0]), int(p[1])))
    pts = np.empty((len(anchors), 3))
    for i, (ax, ay) in enumerate(anchors):
        d = float(anchor_depths[ay, ax]) if hasattr(anchor_depths, "shape") \
            else float(anchor_depths[(ax, ay)])
        pts[i] = [d * (ax - cam.cx) / cam.fx, d * (ay - cam.cy) / cam.fy, d]
    if len(anchors) >= 3:
        _, inliers = ransac_plane(pts, epsilon, trials, rng)
        anchors = [a for a, keep in zip(anchors, inliers) if keep]
    if not anchors:
        return DeformedPatch((int(p[0]), int(p[1])))
    labels = dbscan(anchors, gamma, eta)
    n_clusters = int(labels.max()) + 1
    if n_clusters > cluster_cap:
        xy = np.asarray(anchors, dtype=np.float64)
        lab = labels.astype(np.int32)
        n_clusters = int(K.merge_clusters_to_cap(xy, len(xy), lab,
                                                 n_clusters, cluster_cap))
        labels = lab
    clusters = []
    for c in range(n_clusters):
        members = [a for a, l in zip(anchors, labels) if l == c]
        size = int(K.round_to_odd(window_size / len(members)))
        size = min(size, window_size)
        clusters.append(AnchorCluster(members, size))
    return DeformedPatch((int(p[0]), int(p[1])), clusters)
