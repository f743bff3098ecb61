"""Reconstruction engine: checkerboard PatchMatch with edge-confined,
attention-consistent patch deformation and disparity-sampling optimization.

Per iteration: red/black half-passes test neighbor + perturbation candidates
(reliable pixels score the conventional windowed cost, unreliable ones the
deformable cost over their patch and incumbent sampling solution), the
sampling solutions are re-optimized, reliability is reclassified, the
segmentation prior is refreshed (votes once, CRF every iteration) and stale
deformed patches are rebuilt. Every random draw derives from (seed, purpose,
iteration, pixel), so outputs are bit-identical across runs and thread counts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _engine_kernels as EK
from . import _kernels as K
from .config import EngineConfig
from .cost import (anchor_patch_spec, central_patch_spec, classify_reliability,
                   spatial_sigma, view_weights_from_costs)
from .deform import offset_shells
from .geometry import (PlaneHypothesis, perturb_hypothesis,
                       random_hypothesis)
from .rng import RandomStream
from .scene_io import CameraParams, DepthNormalMap, SceneBundle
from .segprior import (BoundaryMap, aggregate_boundary, crf_refine,
                       extract_boundaries, intersect_layers, retain_masks)

logger = logging.getLogger(__name__)

_STENCIL = np.array([(1, 0), (-1, 0), (0, 1), (0, -1),
                     (2, 0), (-2, 0), (0, 2), (0, -2)], dtype=np.int64)


@dataclass
class _Patches:
    """Flat ragged storage of every pixel's deformed patch. Anchors of one
    cluster sit in a contiguous run; akn repeats the run length per member."""

    aptr: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    ahalf: np.ndarray
    ans: np.ndarray
    akn: np.ndarray
    asptr: np.ndarray
    sdx: np.ndarray
    sdy: np.ndarray
    scw: np.ndarray
    scx: np.ndarray
    asw: np.ndarray
    awx: np.ndarray
    awxx: np.ndarray
    avalid: np.ndarray

    @classmethod
    def empty(cls, n_pix: int) -> "_Patches":
        return cls(aptr=np.zeros(n_pix + 1, dtype=np.int64),
                   ax=np.zeros(0, dtype=np.int32),
                   ay=np.zeros(0, dtype=np.int32),
                   ahalf=np.zeros(0, dtype=np.int16),
                   ans=np.zeros(0, dtype=np.int16),
                   akn=np.zeros(0, dtype=np.int16),
                   asptr=np.zeros(1, dtype=np.int64),
                   sdx=np.zeros(0, dtype=np.int16),
                   sdy=np.zeros(0, dtype=np.int16),
                   scw=np.zeros(0), scx=np.zeros(0),
                   asw=np.zeros(0), awx=np.zeros(0), awxx=np.zeros(0),
                   avalid=np.zeros(0, dtype=np.uint8))

    def pixel_list(self) -> np.ndarray:
        return np.nonzero(np.diff(self.aptr) > 0)[0].astype(np.int64)


@dataclass
class IterationStats:
    iteration: int
    reliable_fraction: float
    mean_cost: float
    rebuilt_patches: int = 0
    audit_violations: int = 0
    elitist_ok: bool = True


@dataclass
class ReconstructionResult:
    depth_map: DepthNormalMap
    reliability: np.ndarray
    stats: list[IterationStats] = field(default_factory=list)
    boundary: np.ndarray | None = None


def _fixed_pattern_pack(window_size: int, every_other: bool):
    """Fixed interval-2 sub-patch offsets for every odd size, packed flat."""
    sizes = list(range(3, window_size + 1, 2))
    dx_all, dy_all, ptr = [], [], [0]
    for size in sizes:
        spec = anchor_patch_spec(size, every_other=every_other and size >= 7)
        for odx, ody in spec.sample_offsets:
            dx_all.append(odx)
            dy_all.append(ody)
        ptr.append(len(dx_all))
    return (np.array(dx_all, dtype=np.int16), np.array(dy_all, dtype=np.int16),
            np.array(ptr, dtype=np.int64))


def _fixed_pattern_counts(pack, size, axx, ayy, h, w):
    fix_dx, fix_dy, fix_ptr = pack
    fi = (size - 3) // 2
    dx = fix_dx[fix_ptr[fi]:fix_ptr[fi + 1]]
    dy = fix_dy[fix_ptr[fi]:fix_ptr[fi + 1]]
    n = int(((axx + dx >= 0) & (axx + dx < w)
             & (ayy + dy >= 0) & (ayy + dy < h)).sum())
    return max(n, 1)


class Reconstructor:
    """Holds the per-view state of one reconstruction run."""

    def __init__(self, bundle: SceneBundle, ref_view: int, config: EngineConfig):
        config.validate()
        if bundle.n_views < 2:
            raise ValueError("reconstruction needs at least 2 views")
        if not 0 <= ref_view < bundle.n_views:
            raise ValueError(f"ref_view {ref_view} out of range")
        self.cfg = config
        self.bundle = bundle
        self.ref_view = ref_view
        self.ref_cam = bundle.cameras[ref_view]
        self.src_ids = [v for v in range(bundle.n_views) if v != ref_view]
        img = bundle.images[ref_view]
        self.h, self.w = img.height, img.width
        self.gref = np.ascontiguousarray(img.gray, dtype=np.float32)
        self.gsrc = np.ascontiguousarray(
            np.stack([bundle.images[v].gray for v in self.src_ids]),
            dtype=np.float32)

        dr = (config.depth_min, config.depth_max)
        if dr[0] is None or dr[1] is None:
            if bundle.depth_range is None:
                raise ValueError("no depth range: set config.depth_min/max or "
                                 "provide depth_range.txt in the scene")
            dr = bundle.depth_range
        self.dmin, self.dmax = float(dr[0]), float(dr[1])

        cams = [bundle.cameras[v] for v in self.src_ids]
        self.ks = np.array([[c.fx, c.fy, c.cx, c.cy] for c in cams])
        self.rrel = np.ascontiguousarray(
            np.stack([c.rotation @ self.ref_cam.rotation.T for c in cams]))
        self.trel = np.ascontiguousarray(
            np.stack([c.rotation @ (self.ref_cam.center - c.center)
                      for c in cams]))

        spec = central_patch_spec(config.window_size)
        self.codx, self.cody = spec.offset_arrays()
        self.cspw = spec.spatial_weights()
        nk = len(self.codx)
        self.cw9 = np.zeros((self.h, self.w, nk))
        self.cx9 = np.zeros((self.h, self.w, nk))
        self.csw = np.zeros((self.h, self.w))
        self.cmx = np.zeros((self.h, self.w))
        self.cvx = np.zeros((self.h, self.w))
        self.cvalid = np.zeros((self.h, self.w), dtype=np.uint8)
        EK.precompute_central_cache(self.gref, self.codx, self.cody, self.cspw,
                                    config.sigma_color, self.cw9, self.cx9,
                                    self.csw, self.cmx, self.cvx, self.cvalid)

        n_pix = self.h * self.w
        nv = len(self.src_ids)
        self.depth = np.zeros((self.h, self.w))
        self.nrm = np.zeros((self.h, self.w, 3))
        self.agg = np.full((self.h, self.w), 2.0)
        self.pview = np.full((nv, self.h, self.w), 2.0)
        self.pview_cent = np.full((nv, self.h, self.w), 2.0)
        self.weights = np.ones((nv, self.h, self.w))
        self.rel = np.zeros((self.h, self.w), dtype=np.uint8)
        self.prev_rel = np.zeros((self.h, self.w), dtype=np.uint8)
        self.bnd = np.zeros((self.h, self.w), dtype=np.uint8)
        self.patches = _Patches.empty(n_pix)
        self.composite_labels: np.ndarray | None = None
        self.votes: np.ndarray | None = None
        self.fixed_pack = _fixed_pattern_pack(config.window_size,
                                              config.every_other_sampling)
        self.delta = (1.0 / self.dmin - 1.0 / self.dmax) / config.delta_steps
        self.stats: list[IterationStats] = []

        self.masks = bundle.masks[ref_view] if bundle.masks else None
        if config.use_prior and self.masks is None:
            logger.warning("no mask pyramid for view %d: running without the "
                           "segmentation prior (unconstrained deformation)",
                           ref_view)

    # -- helpers ----------------------------------------------------------------

    def _classify(self):
        """Reliability rides on the central-window (conventional) costs so a
        deformation-rescued pixel cannot flap into the conventional path."""
        self.prev_rel = self.rel
        w = self.weights
        wsum = np.maximum(w.sum(axis=0), 1e-12)
        agg_cent = (w * self.pview_cent).sum(axis=0) / wsum
        agg_cent[w.sum(axis=0) <= 0] = 2.0
        rm = classify_reliability(agg_cent, self.pview_cent,
                                  self.cfg.reliability_threshold,
                                  self.cfg.min_consistent_views)
        textured = self.cvx >= self.cfg.texture_floor
        self.rel = (rm.reliable & textured).astype(np.uint8)

    def _unreliable_pixels(self) -> np.ndarray:
        return np.nonzero((self.rel == 0).ravel())[0].astype(np.int64)

    def _kernel_state(self):
        p = self.patches
        return (self.codx, self.cody, self.cspw, self.cfg.sigma_color,
                self.cw9, self.cx9, self.csw, self.cmx, self.cvx, self.cvalid,
                p.aptr, p.ax, p.ay, p.akn, p.asptr, p.sdx, p.sdy, p.scw,
                p.scx, p.asw, p.awx, p.awxx, p.avalid)

    def _cam_args(self):
        c = self.ref_cam
        return (c.fx, c.fy, c.cx, c.cy, self.ks, self.rrel, self.trel,
                self.gref, self.gsrc)

    # -- pipeline stages ----------------------------------------------------------

    def initialize(self):
        EK.init_pass(self.cfg.seed, self.dmin, self.dmax, *self._cam_args(),
                     *self._kernel_state(), self.depth, self.nrm, self.agg,
                     self.pview, self.pview_cent, self.weights)
        self._classify()

    def sweep(self, it: int):
        cfg = self.cfg
        shrink = cfg.anneal ** (it - 1)
        for color in (0, 1):
            snap_d = self.depth.copy()
            snap_n = self.nrm.copy()
            EK.sweep_color(color, it, cfg.seed, self.dmin, self.dmax,
                           cfg.depth_perturb_scale * shrink,
                           math.radians(cfg.angle_perturb_deg) * shrink, cfg.lam,
                           cfg.sigma_color, cfg.texture_floor,
                           cfg.deformation, _STENCIL,
                           *self._cam_args(),
                           self.codx, self.cody, self.cspw,
                           self.cw9, self.cx9, self.csw, self.cmx, self.cvx,
                           self.cvalid,
                           self.patches.aptr, self.patches.ax, self.patches.ay,
                           self.patches.akn, self.patches.asptr,
                           self.patches.sdx, self.patches.sdy,
                           self.patches.scw, self.patches.scx,
                           self.patches.asw, self.patches.awx,
                           self.patches.awxx, self.patches.avalid,
                           snap_d, snap_n, self.rel, self.weights,
                           self.depth, self.nrm, self.agg, self.pview,
                           self.pview_cent)

    def update_prior(self, it: int):
        """Vote + aggregate at the first iteration, CRF-refresh afterwards."""
        cfg = self.cfg
        if not cfg.use_prior or self.masks is None or not cfg.deformation:
            return
        if it == 1:
            layers = self.masks.layers
            if cfg.prior_aggregation:
                layer_bnds = np.ascontiguousarray(np.stack(
                    [extract_boundaries(l).mask for l in layers])
                    .astype(np.uint8))
                votes = np.full((self.h, self.w), -1, dtype=np.int8)
                EK.votes_pass(self._unreliable_pixels(), cfg.seed,
                              cfg.spoke_max_radius, cfg.ransac_epsilon_rel,
                              math.radians(cfg.theta_deg), self.ref_cam.fx,
                              self.ref_cam.fy, self.ref_cam.cx,
                              self.ref_cam.cy, self.rel, layer_bnds,
                              self.depth, votes)
                self.votes = votes
                retained = retain_masks(layers, votes.astype(np.int64))
                composite, bmap = aggregate_boundary(layers, retained)
            else:
                composite = intersect_layers(layers)
                bmap = extract_boundaries(composite)
            self.composite_labels = composite
            self.bnd = bmap.mask.astype(np.uint8)
        if self.composite_labels is None:
            return
        if cfg.prior_refinement:
            alpha = cfg.crf_alpha_rel * (self.dmax - self.dmin)
            img = self.bundle.images[self.ref_view].data
            res = crf_refine(self.composite_labels, self.depth, img, t=it,
                             alpha=alpha, beta=cfg.crf_beta,
                             iters=cfg.crf_iters,
                             keep_prob=cfg.crf_keep_prob,
                             pairwise_weight=cfg.crf_pairwise_weight)
            self.composite_labels = res.labels
            self.bnd = res.boundary.mask.astype(np.uint8)

    def rebuild_patches(self, it: int) -> tuple[int, int]:
        """Rebuild patches for unreliable pixels that lack one or whose patch
        went stale (anchor no longer reliable / segment now crosses an edge).
        Returns (rebuilt count, audit violation count)."""
        cfg = self.cfg
        if not cfg.deformation:
            return 0, 0
        old = self.patches
        n_pix = self.h * self.w
        unreliable = self.rel.ravel() == 0
        has_patch = np.diff(old.aptr) > 0
        active_pix = np.nonzero(has_patch & unreliable)[0].astype(np.int64)
        violations = np.zeros(len(active_pix), dtype=np.uint8)
        if len(active_pix):
            EK.audit_pass(active_pix, self.rel, self.bnd, old.aptr, old.ax,
                          old.ay, violations)
        stale = np.zeros(n_pix, dtype=bool)
        stale[active_pix[violations.astype(bool)]] = True
        build = unreliable & (~has_patch | stale)
        if it <= cfg.patch_refresh_iters:
            build = unreliable.copy()
        # patches of freshly-reliable pixels stay dormant one round (to ride
        # out reliability flaps); stably reliable pixels drop theirs
        flapping = (self.rel.ravel() == 1) & (self.prev_rel.ravel() == 0)
        keep = has_patch & ~stale & ~build & (unreliable | flapping)
        pix = np.nonzero(build | keep)[0].astype(np.int64)
        if len(pix) == 0:
            self.patches = _Patches.empty(n_pix)
            return 0, int(violations.sum())
        rebuilt = build[pix].astype(np.uint8)

        max_anchor = 4 * cfg.spoke_rays
        tmp_ax = np.zeros((len(pix), max_anchor), dtype=np.int32)
        tmp_ay = np.zeros((len(pix), max_anchor), dtype=np.int32)
        tmp_k = np.zeros((len(pix), max_anchor), dtype=np.int16)
        tmp_n = np.zeros(len(pix), dtype=np.int32)
        if rebuilt.any():
            shells = offset_shells(cfg.spoke_max_radius)
            EK.build_scan_pass(pix, rebuilt, it, cfg.seed, self.rel, self.bnd,
                               self.depth, self.cvx, cfg.anchor_quality_floor,
                               self.ref_cam.fx, self.ref_cam.fy,
                               self.ref_cam.cx, self.ref_cam.cy,
                               math.radians(cfg.theta_deg), cfg.spoke_rays,
                               cfg.spoke_max_radius, cfg.equid_iters,
                               cfg.equidistribution, cfg.clustering,
                               cfg.ransac_epsilon_rel, cfg.ransac_trials,
                               cfg.dbscan_gamma, cfg.dbscan_eta,
                               cfg.cluster_cap, cfg.window_size,
                               shells.odx, shells.ody, shells.oang, shells.d2,
                               shells.start, shells.n_shells,
                               tmp_ax, tmp_ay, tmp_k, tmp_n)

        # per-pixel anchor/sample totals (python owns the exact prefix sums)
        anchor_counts = np.zeros(n_pix, dtype=np.int64)
        sample_counts = np.zeros(n_pix, dtype=np.int64)
        anchor_counts[keep] = np.diff(old.aptr)[keep]
        for pid in np.nonzero(keep)[0]:
            a0, a1 = old.aptr[pid], old.aptr[pid + 1]
            sample_counts[pid] = old.asptr[a1] - old.asptr[a0]
        for i, pid in enumerate(pix):
            if not rebuilt[i]:
                continue
            n_a = int(tmp_n[i])
            anchor_counts[pid] = n_a
            total = 0
            for t in range(n_a):
                k = int(tmp_k[i, t])
                size = min(int(K.round_to_odd(cfg.window_size / k)),
                           cfg.window_size)
                if cfg.sampling_opt:
                    half = size // 2
                    axx, ayy = int(tmp_ax[i, t]), int(tmp_ay[i, t])
                    x0 = max(axx - half, 0)
                    x1 = min(axx + half, self.w - 1)
                    y0 = max(ayy - half, 0)
                    y1 = min(ayy + half, self.h - 1)
                    cells = (x1 - x0 + 1) * (y1 - y0 + 1)
                    total += min(K.samples_per_anchor(k), cells)
                else:
                    total += _fixed_pattern_counts(
                        self.fixed_pack, size, int(tmp_ax[i, t]),
                        int(tmp_ay[i, t]), self.h, self.w)
            sample_counts[pid] = total

        new_aptr = np.zeros(n_pix + 1, dtype=np.int64)
        np.cumsum(anchor_counts, out=new_aptr[1:])
        new_asptr_base = np.zeros(n_pix + 1, dtype=np.int64)
        np.cumsum(sample_counts, out=new_asptr_base[1:])
        n_anchor = int(new_aptr[-1])
        n_sample = int(new_asptr_base[-1])

        new = _Patches(
            new_aptr,
            np.zeros(n_anchor, dtype=np.int32), np.zeros(n_anchor, dtype=np.int32),
            np.zeros(n_anchor, dtype=np.int16), np.zeros(n_anchor, dtype=np.int16),
            np.zeros(n_anchor, dtype=np.int16),
            np.zeros(n_anchor + 1, dtype=np.int64),
            np.zeros(n_sample, dtype=np.int16), np.zeros(n_sample, dtype=np.int16),
            np.zeros(n_sample), np.zeros(n_sample),
            np.zeros(n_anchor), np.zeros(n_anchor), np.zeros(n_anchor),
            np.zeros(n_anchor, dtype=np.uint8))
        if n_anchor:
            EK.build_fill_pass(pix, rebuilt, it, cfg.seed, self.h, self.w,
                               cfg.window_size, cfg.sampling_opt,
                               tmp_ax, tmp_ay, tmp_k, tmp_n,
                               *self.fixed_pack,
                               old.aptr, old.ax, old.ay, old.ahalf, old.ans,
                               old.akn, old.asptr, old.sdx, old.sdy,
                               old.scw, old.scx, old.asw, old.awx, old.awxx,
                               old.avalid,
                               new_aptr, new_asptr_base,
                               new.ax, new.ay, new.ahalf, new.ans, new.akn,
                               new.asptr, new.sdx, new.sdy,
                               new.scw, new.scx, new.asw, new.awx, new.awxx,
                               new.avalid)
            new.asptr[-1] = n_sample
            self.patches = new
            rebuilt_pix = pix[rebuilt.astype(bool)]
            EK.refresh_anchor_cache(rebuilt_pix, self.gref, cfg.sigma_color,
                                    new.aptr, new.ax, new.ay, new.asptr,
                                    new.sdx, new.sdy, new.scw, new.scx,
                                    new.asw, new.awx, new.awxx, new.avalid)
        else:
            self.patches = new
        return int(rebuilt.sum()), int(violations.sum())

    def run_local_search(self, it: int):
        cfg = self.cfg
        if not cfg.deformation or not cfg.sampling_opt:
            return
        plist = self.patches.pixel_list()
        plist = plist[self.rel.ravel()[plist] == 0]
        if len(plist) == 0:
            return
        p = self.patches
        delta_it = self.delta * cfg.anneal ** (it - 1)
        EK.local_search_pass(plist, it, cfg.seed, cfg.mu, delta_it,
                             cfg.ls_solutions, cfg.ls_rounds, cfg.omega,
                             cfg.var_floor, cfg.cost_term, cfg.variance_term,
                             1.0 / self.dmax, 1.0 / self.dmin,
                             cfg.profile_views, cfg.lam, cfg.sigma_color,
                             cfg.texture_floor,
                             *self._cam_args(),
                             self.codx, self.cody, self.cspw,
                             self.cw9, self.cx9, self.csw, self.cmx, self.cvx,
                             self.cvalid,
                             p.aptr, p.ax, p.ay, p.ahalf, p.ans, p.akn,
                             p.asptr, p.sdx, p.sdy, p.scw, p.scx, p.asw,
                             p.awx, p.awxx, p.avalid, self.weights,
                             self.depth, self.nrm, self.agg, self.pview,
                             self.pview_cent, self.rel)

    def run(self) -> ReconstructionResult:
        cfg = self.cfg
        self.initialize()
        for it in range(1, cfg.iterations + 1):
            self.weights = view_weights_from_costs(self.pview, cfg.view_top_k)
            self.sweep(it)
            self.run_local_search(it)
            prev_rel = float(self.rel.mean())
            self._classify()
            self.update_prior(it)
            rebuilt, violations = self.rebuild_patches(it)
            if it == 1:
                self.run_local_search(it)  # fresh x0 solutions get one pass
            self.stats.append(IterationStats(
                it, float(self.rel.mean()), float(self.agg.mean()),
                rebuilt, violations))
            logger.debug("view %d iter %d: reliable %.3f mean cost %.4f "
                         "(rebuilt %d, audit %d)", self.ref_view, it,
                         self.stats[-1].reliable_fraction,
                         self.stats[-1].mean_cost, rebuilt, violations)
        normals = self.nrm.astype(np.float64)
        dn = DepthNormalMap(self.w, self.h, self.depth.copy(), normals)
        return ReconstructionResult(dn, self.rel.astype(bool).copy(),
                                    list(self.stats),
                                    self.bnd.astype(bool).copy())


def reconstruct(bundle: SceneBundle, ref_view: int,
                config: EngineConfig | None = None) -> ReconstructionResult:
    """Reconstruct one reference view; see Reconstructor for the pipeline."""
    return Reconstructor(bundle, ref_view, config or EngineConfig()).run()


def propagate_candidates(p, depth: np.ndarray, normals: np.ndarray,
                         cam: CameraParams, depth_range, rng: RandomStream,
                         config: EngineConfig | None = None) -> list[PlaneHypothesis]:
    """Candidate hypotheses for pixel p: current, 4 adjacent + 4 distance-2
    neighbors (planes re-anchored at p), plus one perturbed and one fresh
    random draw. Border pixels get a truncated stencil."""
    cfg = config or EngineConfig()
    h, w = depth.shape
    px, py = int(p[0]), int(p[1])
    out = [PlaneHypothesis(float(depth[py, px]), normals[py, px].copy())]
    ray_p = np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0])
    for ox, oy in _STENCIL:
        qx, qy = px + ox, py + oy
        if not (0 <= qx < w and 0 <= qy < h):
            continue
        n = normals[qy, qx]
        if n @ ray_p > -1e-9:
            continue
        ray_q = np.array([(qx - cam.cx) / cam.fx, (qy - cam.cy) / cam.fy, 1.0])
        dt = K.transfer_depth(n[0], n[1], n[2], float(depth[qy, qx]),
                              ray_q[0], ray_q[1], ray_q[2],
                              ray_p[0], ray_p[1], ray_p[2])
        if depth_range[0] <= dt <= depth_range[1]:
            out.append(PlaneHypothesis(dt, n.copy()))
    out.append(perturb_hypothesis(rng, out[0], p, cam, depth_range,
                                  cfg.depth_perturb_scale,
                                  math.radians(cfg.angle_perturb_deg)))
    out.append(random_hypothesis(rng, p, cam, depth_range))
    return out


def fuse(results: list[DepthNormalMap], cameras: list[CameraParams],
         images, consistency_views: int = 2, depth_tol: float = 0.01,
         angle_tol_deg: float = 15.0):
    """Geometric-consistency fusion of per-view depth maps.

    A pixel survives when at least consistency_views other views agree within
    depth_tol (relative) and angle_tol on the normal; agreeing measurements
    are averaged and consumed so each surface point is emitted once. Returns
    (xyz, normals, colors) arrays.
    """
    n_views = len(results)
    cos_tol = math.cos(math.radians(angle_tol_deg))
    used = [np.zeros(r.depth.shape, dtype=bool) for r in results]
    world_pts, world_nrm, world_col = [], [], []
    for a in range(n_views):
        dn = results[a]
        cam = cameras[a]
        h, w = dn.depth.shape
        valid = (dn.depth > 0) & ~used[a]
        iy, ix = np.nonzero(valid)
        if len(iy) == 0:
            continue
        d = dn.depth[iy, ix].astype(np.float64)
        rays = np.stack([(ix - cam.cx) / cam.fx, (iy - cam.cy) / cam.fy,
                         np.ones_like(d)], axis=1)
        xyz = (rays * d[:, None]) @ cam.rotation + cam.center
        nrm = dn.normals[iy, ix].astype(np.float64) @ cam.rotation
        acc_xyz = xyz.copy()
        acc_nrm = nrm.copy()
        count = np.ones(len(iy))
        consumers = []
        for b in range(n_views):
            if b == a:
                continue
            cam_b = cameras[b]
            dn_b = results[b]
            pc = (xyz - cam_b.center) @ cam_b.rotation.T
            zb = pc[:, 2]
            ub = np.rint(cam_b.fx * pc[:, 0] / np.maximum(zb, 1e-9)
                         + cam_b.cx).astype(int)
            vb = np.rint(cam_b.fy * pc[:, 1] / np.maximum(zb, 1e-9)
                         + cam_b.cy).astype(int)
            hb, wb = dn_b.depth.shape
            inb = (zb > 0) & (ub >= 0) & (ub < wb) & (vb >= 0) & (vb < hb)
            ub_c = np.clip(ub, 0, wb - 1)
            vb_c = np.clip(vb, 0, hb - 1)
            db = dn_b.depth[vb_c, ub_c].astype(np.float64)
            ok = inb & (db > 0) & (np.abs(zb - db) <= depth_tol * db)
            nb = dn_b.normals[vb_c, ub_c].astype(np.float64) @ cam_b.rotation
            ok &= (nb * nrm).sum(1) >= cos_tol
            ok &= ~used[b][vb_c, ub_c]
            rays_b = np.stack([(ub_c - cam_b.cx) / cam_b.fx,
                               (vb_c - cam_b.cy) / cam_b.fy,
                               np.ones_like(db)], axis=1)
            xyz_b = (rays_b * db[:, None]) @ cam_b.rotation + cam_b.center
            acc_xyz[ok] += xyz_b[ok]
            acc_nrm[ok] += nb[ok]
            count += ok
            consumers.append((b, ok, vb_c, ub_c))
        survive = count >= consistency_views + 1
        if not survive.any():
            continue
        for b, ok, vb_c, ub_c in consumers:
            sel = ok & survive
            used[b][vb_c[sel], ub_c[sel]] = True
        used[a][iy[survive], ix[survive]] = True
        mean_xyz = acc_xyz[survive] / count[survive, None]
        mean_nrm = acc_nrm[survive]
        mean_nrm /= np.linalg.norm(mean_nrm, axis=1, keepdims=True)
        img = images[a]
        if img.channels == 3:
            col = img.data[iy[survive], ix[survive]]
        else:
            col = np.repeat(img.data[iy[survive], ix[survive], None], 3, axis=1)
        world_pts.append(mean_xyz)
        world_nrm.append(mean_nrm)
        world_col.append(np.clip(np.rint(col * 255.0), 0, 255).astype(np.uint8))
    if not world_pts:
        return (np.zeros((0, 3)), np.zeros((0, 3)),
                np.zeros((0, 3), dtype=np.uint8))
    return (np.concatenate(world_pts), np.concatenate(world_nrm),
            np.concatenate(world_col))
