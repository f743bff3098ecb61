"""scikit-learn style facade over the reconstruction engine.

The estimator treats a SceneBundle as one sample: fit() reconstructs every
view and fuses them, exposing results as trailing-underscore attributes the
way clusterers do (fit -> labels_). All constructor parameters mirror
EngineConfig fields, so get_params / set_params / clone compose with the
wider scikit-learn ecosystem.

    est = MultiViewDepthEstimator(iterations=8, seed=7)
    est.fit(bundle)
    est.depth_maps_[0].depth, est.point_cloud_
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import EngineConfig
from .engine import fuse, reconstruct
from .scene_io import SceneBundle
from .validation import check_scene_bundle

_CONFIG_FIELDS = [f.name for f in fields(EngineConfig)]


def _make_init(cls):
    # BaseEstimator introspects __init__ for get_params; generate one whose
    # signature lists every EngineConfig field explicitly
    defaults = EngineConfig()
    args = ", ".join(f"{n}={getattr(defaults, n)!r}" for n in _CONFIG_FIELDS)
    body = "\n".join(f"    self.{n} = {n}" for n in _CONFIG_FIELDS)
    src = f"def __init__(self, {args}):\n{body}\n"
    ns: dict = {}
    exec(src, ns)  # noqa: S102 - static template over dataclass fields
    cls.__init__ = ns["__init__"]
    return cls


@_make_init
class MultiViewDepthEstimator(BaseEstimator):
    """Depth-map reconstruction as an estimator.

    Parameters are EngineConfig fields (see deformmvs.config). Attributes
    after fit():

    depth_maps_ : list[DepthNormalMap], one per view
    reliability_maps_ : list[np.ndarray], final reliable-pixel flags
    boundaries_ : list[np.ndarray or None], final aggregated depth edges
    point_cloud_ : (N, 3) fused world points
    point_normals_ : (N, 3) fused normals
    point_colors_ : (N, 3) uint8
    stats_ : per-view list of per-iteration IterationStats
    """

    def _config(self) -> EngineConfig:
        cfg = EngineConfig(**{n: getattr(self, n) for n in _CONFIG_FIELDS})
        cfg.validate()
        return cfg

    def fit(self, X: SceneBundle, y=None) -> "MultiViewDepthEstimator":
        """Reconstruct every view of the bundle and fuse the depth maps."""
        bundle = check_scene_bundle(X)
        cfg = self._config()
        results = [reconstruct(bundle, v, cfg) for v in range(bundle.n_views)]
        self.depth_maps_ = [r.depth_map for r in results]
        self.reliability_maps_ = [r.reliability for r in results]
        self.boundaries_ = [r.boundary for r in results]
        self.stats_ = [r.stats for r in results]
        xyz, nrm, col = fuse(self.depth_maps_, bundle.cameras, bundle.images,
                             cfg.fuse_consistency_views, cfg.fuse_depth_tol,
                             cfg.fuse_angle_tol_deg)
        self.point_cloud_ = xyz
        self.point_normals_ = nrm
        self.point_colors_ = col
        self.n_views_ = bundle.n_views
        return self

    def fit_reconstruct(self, X: SceneBundle):
        """fit() and return the per-view depth maps."""
        return self.fit(X).depth_maps_

    def transform(self, X: SceneBundle) -> np.ndarray:
        """Reconstruct a bundle and return the stacked per-view depth arrays
        (V, H, W); stateless apart from the configured parameters."""
        est = MultiViewDepthEstimator(**self.get_params()).fit(X)
        return np.stack([m.depth for m in est.depth_maps_])

    def _check_fitted(self):
        if not hasattr(self, "depth_maps_"):
            raise NotFittedError("call fit(bundle) first")

    def score(self, X: SceneBundle = None, y=None) -> float:
        """Mean final reliable-pixel fraction across views (higher is better)."""
        self._check_fitted()
        return float(np.mean([r.mean() for r in self.reliability_maps_]))
