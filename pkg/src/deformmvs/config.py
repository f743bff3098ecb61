"""Engine configuration: paper-published constants as defaults plus every
artifact-level knob, including the ablation switches."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict


@dataclass
class EngineConfig:
    # core matching (published defaults: w=11, lambda=0.25, theta=45, |S|=8, mu=5)
    iterations: int = 8
    window_size: int = 11
    lam: float = 0.25
    theta_deg: float = 45.0
    spoke_rays: int = 8
    mu: int = 5
    seed: int = 0

    # depth range; None = take from the scene (depth_range.txt) or fail
    depth_min: float | None = None
    depth_max: float | None = None

    # cost / reliability
    sigma_color: float = 0.1
    reliability_threshold: float = 0.5
    min_consistent_views: int = 2
    # central-patch intensity variance below this = no texture = ambiguous,
    # regardless of how well the sensor noise happens to correlate
    texture_floor: float = 1e-4
    # anchors prefer well-textured windows (quality = central variance);
    # weakly textured rim pixels are a fallback only
    anchor_quality_floor: float = 8e-3
    view_top_k: int = 4
    every_other_sampling: bool = True

    # deformation
    spoke_max_radius: int = 96
    equid_iters: int = 3
    # rebuild every unreliable pixel's patch during the first iterations,
    # while the reliability map is still growing; afterwards only stale
    # patches (audit violations) rebuild
    patch_refresh_iters: int = 3
    dbscan_gamma: float = 11.0
    dbscan_eta: int = 3
    ransac_epsilon_rel: float = 0.01
    ransac_trials: int = 64
    cluster_cap: int = 8

    # refinement candidates per pixel per sweep: one perturbed, one re-randomized;
    # scales shrink geometrically per iteration so late rounds do sub-percent work
    depth_perturb_scale: float = 0.08
    angle_perturb_deg: float = 30.0
    anneal: float = 0.5

    # segmentation prior / CRF
    crf_alpha_rel: float = 0.05   # alpha = crf_alpha_rel * (depth_max - depth_min)
    crf_beta: float = 0.2
    crf_iters: int = 5
    crf_keep_prob: float = 0.9
    crf_pairwise_weight: float = 4.0

    # disparity-sampling optimization
    ls_solutions: int = 8
    ls_rounds: int = 2
    omega: float = 1e-4
    var_floor: float = 1e-6
    profile_views: int = 1
    delta_steps: int = 64  # delta = (1/d_min - 1/d_max) / delta_steps

    # fusion
    fuse_depth_tol: float = 0.01
    fuse_angle_tol_deg: float = 15.0
    fuse_consistency_views: int = 2

    # diagnostics
    audit_confinement: bool = False

    # ablation switches (all on = full method)
    deformation: bool = True          # no-dpm: conventional PatchMatch only
    use_prior: bool = True            # no-mul: no segmentation prior at all
    prior_aggregation: bool = True    # no-agr: skip voting, intersect all layers
    prior_refinement: bool = True     # no-ref: skip CRF refinement
    equidistribution: bool = True     # no-eqd: fixed 45-degree fan
    clustering: bool = True           # no-clu: one anchor per sector, k=1
    sampling_opt: bool = True         # no-syn: fixed sampling, no local search
    variance_term: bool = True        # no-var: objective = sum of costs
    cost_term: bool = True            # no-cst: objective = variance term only

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.window_size % 2 != 1 or self.window_size < 3:
            raise ValueError("window_size must be odd and >= 3")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.mu < 3 or self.mu % 2 == 0:
            raise ValueError("mu must be odd and >= 3")
        if self.spoke_rays < 2:
            raise ValueError("need at least 2 spoke rays")
        if self.depth_min is not None and self.depth_max is not None \
                and not 0 < self.depth_min < self.depth_max:
            raise ValueError("invalid depth range")
        if self.ls_solutions < 1 or self.ls_rounds < 1:
            raise ValueError("local search needs ls_solutions, ls_rounds >= 1")
        if not self.cost_term and not self.variance_term:
            raise ValueError("objective needs at least one active term")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# CLI ablation flag -> config overrides (names mirror the ablation table rows)
ABLATIONS: dict[str, dict] = {
    "no-dpm": {"deformation": False},
    "no-mul": {"use_prior": False},
    "no-agr": {"prior_aggregation": False},
    "no-ref": {"prior_refinement": False},
    "no-con": {"equidistribution": False, "clustering": False},
    "no-eqd": {"equidistribution": False},
    "no-clu": {"clustering": False},
    "no-syn": {"sampling_opt": False},
    "no-var": {"variance_term": False},
    "no-cst": {"cost_term": False},
}


def apply_ablations(cfg: EngineConfig, names) -> EngineConfig:
    for name in names:
        if name == "all":
            cfg.deformation = False
            cfg.use_prior = False
            cfg.sampling_opt = False
            continue
        if name not in ABLATIONS:
            raise KeyError(f"unknown ablation '{name}' "
                           f"(choose from {sorted(ABLATIONS)} or 'all')")
        for key, val in ABLATIONS[name].items():
            setattr(cfg, key, val)
    return cfg
