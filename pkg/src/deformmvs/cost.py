"""Patch matching costs: bilateral-weighted NCC, deformable aggregation,
multi-view weighting and pixel reliability.

Cost convention: 1 - weighted NCC, so 0 is a perfect match, 2 the worst
(anti-correlated, ambiguous or out of bounds).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .geometry import Homography
from .scene_io import ImageBuffer

DEFAULT_SIGMA_COLOR = 0.1


def spatial_sigma(window_size: int) -> float:
    """Spatial sigma of the bilateral weight. The sample grids here are
    sparse (interval w/2 or 2), so sigma equals the window size; a tighter
    sigma would collapse the effective sample count."""
    return float(window_size)


@dataclass(frozen=True)
class PatchSpec:
    """Window size plus the explicit sample offsets evaluated inside it."""

    window_size: int
    sample_interval: int
    sample_offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.window_size % 2 != 1:
            raise ValueError("window size must be odd")
        half = self.window_size // 2
        seen = set()
        for dx, dy in self.sample_offsets:
            if abs(dx) > half or abs(dy) > half:
                raise ValueError("offset outside the window")
            if (dx, dy) in seen:
                raise ValueError("duplicate offset")
            seen.add((dx, dy))

    def offset_arrays(self):
        dx = np.array([o[0] for o in self.sample_offsets], dtype=np.float64)
        dy = np.array([o[1] for o in self.sample_offsets], dtype=np.float64)
        return dx, dy

    def spatial_weights(self, sigma_s: float | None = None) -> np.ndarray:
        s = spatial_sigma(self.window_size) if sigma_s is None else sigma_s
        dx, dy = self.offset_arrays()
        return np.exp(-(dx * dx + dy * dy) / (2.0 * s * s))


def _grid(half: int, step: int) -> tuple[tuple[int, int], ...]:
    vals = list(range(-half, half + 1, step))
    return tuple((dx, dy) for dy in vals for dx in vals)


def central_patch_spec(window_size: int = 11) -> PatchSpec:
    """Coarse central window: interval w/2 (a 3x3 grid of samples for w=11)."""
    half = window_size // 2
    step = max(1, half)
    return PatchSpec(window_size, step, _grid(half, step))


def anchor_patch_spec(window_size: int, every_other: bool = False) -> PatchSpec:
    """Dense anchor sub-patch: interval 2; optionally decimated to every
    other row/column of the sample grid."""
    half = window_size // 2
    vals = list(range(-half, half + 1, 2))
    if every_other:
        vals = vals[::2]
    offs = tuple((dx, dy) for dy in vals for dx in vals)
    return PatchSpec(window_size, 2, offs)


def weighted_ncc(ref_img: ImageBuffer, src_img: ImageBuffer, p, h: Homography,
                 spec: PatchSpec, sigma_s: float | None = None,
                 sigma_c: float = DEFAULT_SIGMA_COLOR) -> float:
    """Bilaterally weighted NCC cost in [0, 2] for pixel p under homography h.

    Weights are computed on the reference patch:
    w_k = exp(-|dx|^2 / 2 sigma_s^2 - (I_k - I_p)^2 / 2 sigma_c^2).
    Samples warp through h with bilinear interpolation; a zero-variance patch
    or any out-of-bounds sample yields the worst cost 2.
    """
    dx, dy = spec.offset_arrays()
    spw = spec.spatial_weights(sigma_s)
    return float(K.wncc(ref_img.gray, src_img.gray, float(p[0]), float(p[1]),
                        h.matrix, dx, dy, len(dx), spw, sigma_c))


def deformable_cost(central_cost: float, anchor_costs, lam: float) -> float:
    """lam * central + (1 - lam) * mean(anchor costs); falls back to the
    central cost alone when no anchors survived deformation."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be within [0, 1]")
    costs = list(anchor_costs)
    if not costs:
        return float(central_cost)
    return float(lam * central_cost + (1.0 - lam) * (sum(costs) / len(costs)))


def aggregate_views(per_view_costs, view_weights) -> float:
    """Weighted mean of per-view costs; 2 when every weight is zero."""
    costs = np.asarray(per_view_costs, dtype=np.float64)
    weights = np.asarray(view_weights, dtype=np.float64)
    if costs.shape != weights.shape:
        raise ValueError("costs and weights must have equal lengths")
    total = weights.sum()
    if total <= 0.0:
        return 2.0
    return float((weights * costs).sum() / total)


def view_weights_from_costs(per_view_costs: np.ndarray, top_k: int) -> np.ndarray:
    """Per-pixel weights 1 - cost/2 for the top-K cheapest views, 0 elsewhere.

    per_view_costs is (V, H, W); stand-in for the cascade-style view selection
    of prior work, isolated here so it can be swapped.
    """
    v = per_view_costs.shape[0]
    w = np.clip(1.0 - per_view_costs / 2.0, 0.0, 1.0)
    if top_k < v:
        order = np.argsort(per_view_costs, axis=0, kind="stable")
        keep = np.zeros_like(w, dtype=bool)
        np.put_along_axis(keep, order[:top_k], True, axis=0)
        w = np.where(keep, w, 0.0)
    return w


@dataclass
class ReliabilityMap:
    """Per-pixel reliable flag plus the aggregated cost that produced it."""

    reliable: np.ndarray  # (H, W) bool
    cost: np.ndarray      # (H, W) float64

    @property
    def fraction(self) -> float:
        return float(self.reliable.mean())


def classify_reliability(agg_cost: np.ndarray, per_view_costs: np.ndarray,
                         threshold: float = 0.5,
                         min_consistent_views: int = 2) -> ReliabilityMap:
    """Reliable iff the aggregated cost beats the threshold and at least
    min_consistent_views views individually beat it too."""
    consistent = (per_view_costs < threshold).sum(axis=0)
    reliable = (agg_cost < threshold) & (consistent >= min_consistent_views)
    return ReliabilityMap(reliable, agg_cost.copy())
