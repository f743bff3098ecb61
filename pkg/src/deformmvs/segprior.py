"""Multi-granularity segmentation prior.

Workflow: extract per-layer label boundaries, vote the best-supported anchor
subset per unreliable pixel (RANSAC inlier counts, lexicographic on
(count, ratio)), retain each mask region only in its winning layer, overlay
the retained regions into one composite raster whose boundaries form the
aggregated depth-edge map, then sharpen that raster with a sparse
(4-connected) mean-field CRF that mixes depth and color similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels as K
from .errors import PriorUnavailableError
from .rng import RandomStream


@dataclass
class BoundaryMap:
    """Binary raster; True marks a label-transition (boundary) pixel."""

    mask: np.ndarray  # (H, W) bool

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def extract_boundaries(layer: np.ndarray) -> BoundaryMap:
    """Mark pixels whose 4-neighborhood label Laplacian is nonzero,
    i.e. any 4-neighbor carries a different label."""
    lab = np.asarray(layer)
    b = np.zeros(lab.shape, dtype=bool)
    b[:-1, :] |= lab[:-1, :] != lab[1:, :]
    b[1:, :] |= lab[1:, :] != lab[:-1, :]
    b[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    b[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    return BoundaryMap(b)


def segment_clear(boundary: BoundaryMap, p, q) -> bool:
    """True when the rasterized segment p->q meets no boundary pixel.

    The start pixel is excluded, the end pixel included; exact corner
    crossings are treated conservatively (both side squares are tested).
    """
    bnd = np.ascontiguousarray(boundary.mask, dtype=np.uint8)
    return not K.segment_hits(bnd, int(p[0]), int(p[1]), int(q[0]), int(q[1]))


def confine_anchors(p, anchors, boundary: BoundaryMap) -> list:
    """Keep the anchors whose connecting segment to p avoids the boundary."""
    bnd = np.ascontiguousarray(boundary.mask, dtype=np.uint8)
    px, py = int(p[0]), int(p[1])
    return [a for a in anchors
            if not K.segment_hits(bnd, px, py, int(a[0]), int(a[1]))]


def ransac_inliers(points: np.ndarray, epsilon: float, trials: int = 512,
                   rng: RandomStream | None = None) -> np.ndarray:
    """Inlier flags of the best 3-point plane (exhaustive for small sets)."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = len(pts)
    if n < 3:
        return np.ones(n, dtype=bool)
    flags = np.zeros(n, dtype=np.uint8)
    state = np.uint64((rng or RandomStream(0)).state)
    K.ransac_plane(pts, n, epsilon, trials, state, flags)
    return flags.astype(bool)


def select_optimal_subset(subsets, hypotheses_3d, epsilon_ransac: float,
                          trials: int = 512) -> int:
    """Winning layer index per the (inlier count, inlier ratio) lexicographic
    rule; ties fall to the coarser (lower-index) layer.

    subsets holds per-layer anchor index lists into hypotheses_3d (the anchors
    back-projected to 3D). Raises PriorUnavailableError when all subsets are
    empty (caller falls back to unconstrained anchors).
    """
    pts_all = np.asarray(hypotheses_3d, dtype=np.float64)
    best = (-1, -1.0)
    winner = -1
    for layer, idx in enumerate(subsets):
        if len(idx) == 0:
            continue
        pts = pts_all[np.asarray(idx, dtype=int)]
        if len(pts) < 3:
            a_n = len(pts)  # too few points to reject any: all trivially planar
        else:
            a_n = int(ransac_inliers(pts, epsilon_ransac, trials,
                                     RandomStream(layer)).sum())
        key = (a_n, a_n / len(idx))
        if key > best:
            best = key
            winner = layer
    if winner < 0:
        raise PriorUnavailableError("all anchor subsets are empty")
    return winner


def retain_masks(layers: list[np.ndarray], votes: np.ndarray) -> list[np.ndarray]:
    """Per-layer boolean rasters of retained regions (Eq.-5 style).

    votes is (H, W) int with the winning layer per unreliable pixel and -1
    elsewhere. A region is retained in layer n iff n is the argmax of the
    vote histogram among its pixels (ties toward the coarser layer); regions
    without any vote are retained only in the coarsest layer.
    """
    n_layers = len(layers)
    voted = votes >= 0
    retained = []
    for n, layer in enumerate(layers):
        k = int(layer.max()) + 1
        hist = np.zeros((k, n_layers), dtype=np.int64)
        if voted.any():
            np.add.at(hist, (layer[voted], votes[voted]), 1)
        counts = hist.sum(axis=1)
        winner = np.argmax(hist, axis=1)  # first max -> coarser layer on ties
        keep_region = np.where(counts > 0, winner == n, n == 0)
        retained.append(keep_region[layer])
    return retained


def overlay_retained(layers: list[np.ndarray], retained: list[np.ndarray]) -> np.ndarray:
    """Composite label raster: finer retained regions overwrite coarser ones;
    pixels covered by no retained region fall back to the coarsest layer.

    Returns an int32 raster with contiguous labels; every pixel is covered
    exactly once (partition property).
    """
    h, w = layers[0].shape
    src_layer = np.zeros((h, w), dtype=np.int32)
    covered = np.zeros((h, w), dtype=bool)
    for n in range(len(layers)):
        src_layer[retained[n]] = n
        covered |= retained[n]
    src_layer[~covered] = 0
    key = np.empty((h, w), dtype=np.int64)
    for n, layer in enumerate(layers):
        sel = src_layer == n
        key[sel] = layer[sel].astype(np.int64) + (np.int64(n) << 32)
    _, composite = np.unique(key, return_inverse=True)
    return composite.reshape(h, w).astype(np.int32)


def relabel_components(labels: np.ndarray) -> np.ndarray:
    """Split disconnected regions sharing a label into separate labels."""
    out = np.zeros(labels.shape, dtype=np.int32)
    nxt = 0
    for lab in np.unique(labels):
        comp, n = ndimage.label(labels == lab)
        out[comp > 0] = comp[comp > 0] + nxt - 1
        nxt += n
    return out


def aggregate_boundary(layers: list[np.ndarray],
                       retained: list[np.ndarray]) -> tuple[np.ndarray, BoundaryMap]:
    """Overlay retained regions, relabel connected components and extract the
    aggregated boundary map."""
    composite = relabel_components(overlay_retained(layers, retained))
    return composite, extract_boundaries(composite)


def intersect_layers(layers: list[np.ndarray]) -> np.ndarray:
    """Common refinement of all layers (used when aggregation is ablated):
    one label per unique tuple of per-layer labels."""
    h, w = layers[0].shape
    key = np.zeros((h, w), dtype=np.int64)
    for layer in layers:
        key = key * (int(layer.max()) + 1) + layer
    _, out = np.unique(key, return_inverse=True)
    return out.reshape(h, w).astype(np.int32)


# --- CRF refinement -------------------------------------------------------------


def _unit_colors(image: np.ndarray) -> np.ndarray:
    """Unit-normalize per-pixel color vectors; colorless pixels map to the
    neutral direction so their pairwise color term vanishes."""
    if image.ndim == 2:
        return np.ones(image.shape + (1,), dtype=np.float64)
    c = image.astype(np.float64)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    neutral = np.full(3, 1.0 / np.sqrt(3.0))
    out = np.where(norm > 1e-6, c / np.maximum(norm, 1e-12), neutral)
    return out


def pairwise_kernel(depth_p, depth_q, color_dot, t: int, alpha: float, beta: float):
    """exp(-(t * |D_p - D_q| / alpha + (1/t) * |I_p . I_q - 1| / beta)).

    Invalid depths (<= 0) on either side drop the depth term (color only).
    """
    dterm = np.abs(depth_p - depth_q) / alpha
    dterm = np.where((depth_p > 0) & (depth_q > 0), dterm, 0.0)
    cterm = np.abs(color_dot - 1.0) / beta
    return np.exp(-(t * dterm + (1.0 / t) * cterm))


@dataclass
class CrfResult:
    labels: np.ndarray
    boundary: BoundaryMap
    energies: list[float]


def crf_energy(labels, unary_labels, edges_h, edges_v, neg_log_keep, neg_log_move):
    """Energy of a hard assignment: unary + Potts-weighted pairwise."""
    unary = np.where(labels == unary_labels, neg_log_keep, neg_log_move).sum()
    pair = (edges_h * (labels[:, :-1] != labels[:, 1:])).sum()
    pair += (edges_v * (labels[:-1, :] != labels[1:, :])).sum()
    return float(unary + pair)


def crf_refine(labels: np.ndarray, depth: np.ndarray, image: np.ndarray,
               t: int, alpha: float, beta: float, iters: int = 5,
               keep_prob: float = 0.9, pairwise_weight: float = 4.0) -> CrfResult:
    """Sparse mean-field CRF over the 4-connected grid.

    Candidate labels per pixel come from its 3x3 neighborhood in the input
    raster (a pixel can only flip to a label adjacent to it). The unary keeps
    the input label with probability keep_prob. Pairwise potential is Potts
    times the depth/color kernel with the iteration index t weighting depth
    against color; pairwise_weight sets its strength against the unary (the
    compatibility weight the underlying formulation leaves open). Returns
    refined labels, their boundary map and the hard energy after each
    mean-field iteration.
    """
    if t < 1:
        raise ValueError("iteration index t must be >= 1")
    labels = np.asarray(labels, dtype=np.int32)
    h, w = labels.shape
    n_labels = int(labels.max()) + 1
    colors = _unit_colors(image)
    dot_h = np.clip((colors[:, :-1] * colors[:, 1:]).sum(-1), -1.0, 1.0)
    dot_v = np.clip((colors[:-1, :] * colors[1:, :]).sum(-1), -1.0, 1.0)
    edges_h = pairwise_weight * pairwise_kernel(depth[:, :-1], depth[:, 1:], dot_h,
                                                t, alpha, beta)
    edges_v = pairwise_weight * pairwise_kernel(depth[:-1, :], depth[1:, :], dot_v,
                                                t, alpha, beta)
    neg_log_keep = -np.log(keep_prob)
    neg_log_move = (-np.log((1.0 - keep_prob) / (n_labels - 1))
                    if n_labels > 1 else np.inf)
    if n_labels == 1:
        bm = extract_boundaries(labels)
        e = crf_energy(labels, labels, edges_h, edges_v, neg_log_keep, 0.0)
        return CrfResult(labels.copy(), bm, [e])

    # candidate labels: unique values in the 3x3 neighborhood
    pad = np.pad(labels, 1, mode="edge")
    stack = np.stack([pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                      for dy in (-1, 0, 1) for dx in (-1, 0, 1)], axis=-1)
    stack = np.sort(stack, axis=-1)
    keep = np.ones(stack.shape, dtype=bool)
    keep[..., 1:] = stack[..., 1:] != stack[..., :-1]
    max_c = int(keep.sum(-1).max())
    cand = np.full((h, w, max_c), -1, dtype=np.int32)
    idx = np.cumsum(keep, axis=-1) - 1
    iy, ix, iz = np.nonzero(keep)
    cand[iy, ix, idx[iy, ix, iz]] = stack[iy, ix, iz]
    valid = cand >= 0

    unary = np.where(cand == labels[..., None], neg_log_keep, neg_log_move)
    unary[~valid] = np.inf
    q = np.exp(-unary)
    q /= q.sum(-1, keepdims=True)

    def q_of_label(qf, cf, lab_grid):
        """Probability each pixel in qf assigns the label in lab_grid."""
        return ((cf == lab_grid[..., None]) * qf).sum(-1)

    yy, xx = np.mgrid[0:h, 0:w]
    parity = (yy + xx) & 1

    def half_update(q, color):
        """Gauss-Seidel on the bipartite grid: one color reads the other's
        fresh beliefs, which keeps the mean-field objective monotone."""
        msg = np.zeros_like(q)
        for ci in range(max_c):
            lab = cand[..., ci]
            m = np.zeros((h, w))
            m[:, :-1] += edges_h * (1.0 - q_of_label(q[:, 1:], cand[:, 1:], lab[:, :-1]))
            m[:, 1:] += edges_h * (1.0 - q_of_label(q[:, :-1], cand[:, :-1], lab[:, 1:]))
            m[:-1, :] += edges_v * (1.0 - q_of_label(q[1:, :], cand[1:, :], lab[:-1, :]))
            m[1:, :] += edges_v * (1.0 - q_of_label(q[:-1, :], cand[:-1, :], lab[1:, :]))
            msg[..., ci] = m
        q_new = np.exp(-(unary + msg))
        q_new[~valid] = 0.0
        q_new /= np.maximum(q_new.sum(-1, keepdims=True), 1e-300)
        active = parity == color
        out = q.copy()
        out[active] = q_new[active]
        return out

    energies = []
    for _ in range(iters):
        q = half_update(q, 0)
        q = half_update(q, 1)
        hard = np.take_along_axis(cand, np.argmax(q, axis=-1)[..., None], axis=-1)[..., 0]
        energies.append(crf_energy(hard, labels, edges_h, edges_v,
                                   neg_log_keep, neg_log_move))
    hard = np.take_along_axis(cand, np.argmax(q, axis=-1)[..., None], axis=-1)[..., 0]
    return CrfResult(hard.astype(np.int32), extract_boundaries(hard), energies)
