"""Synthetic multi-view scenes with analytic ground truth.

Primitives are finite textured rectangles and axis-aligned boxes, ray-cast
analytically per pixel (no meshes), so ground-truth depth and normals are
exact to machine precision. Ground-truth mask pyramids come straight from
primitive / face identities: the coarse layer labels primitives, the fine
layer labels faces and texture regions, and an optional corrupted layer
deliberately merges two depth-separated primitives to exercise the
segmentation-prior voting.

Textures are value noise evaluated at the 3D surface point, so views are
photometrically consistent up to 8-bit quantization plus the configured
sensor noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import derive_state, mix64
from .scene_io import (CameraParams, DepthNormalMap, ImageBuffer, MaskPyramid,
                       SceneBundle)


# --- procedural textures -----------------------------------------------------


def _lattice_hash(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic pseudo-random value in [0,1) per lattice point."""
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ np.uint64(mix64(seed)))
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def value_noise(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    """Smooth (bilinear) value noise in [0,1), continuous in (u, v)."""
    iu = np.floor(u)
    iv = np.floor(v)
    fu = u - iu
    fv = v - iv
    fu = fu * fu * (3.0 - 2.0 * fu)
    fv = fv * fv * (3.0 - 2.0 * fv)
    iu = iu.astype(np.int64)
    iv = iv.astype(np.int64)
    a = _lattice_hash(iu, iv, seed)
    b = _lattice_hash(iu + 1, iv, seed)
    c = _lattice_hash(iu, iv + 1, seed)
    d = _lattice_hash(iu + 1, iv + 1, seed)
    return (a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv


@dataclass(frozen=True)
class Texture:
    """Procedural albedo over a face's (u, v) in [0,1]^2."""

    kind: str = "noise"        # noise | checker | flat
    base: float = 0.5
    amplitude: float = 0.4
    scale: float = 12.0
    seed: int = 0
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def albedo(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.kind == "flat":
            return np.full(u.shape, self.base)
        if self.kind == "checker":
            checker = (np.floor(u * self.scale) + np.floor(v * self.scale)) % 2
            wobble = value_noise(u * self.scale * 2.7, v * self.scale * 2.7,
                                 self.seed + 1) - 0.5
            return self.base + self.amplitude * (checker - 0.5) \
                + 0.3 * self.amplitude * wobble
        n = (value_noise(u * self.scale, v * self.scale, self.seed)
             + 0.5 * value_noise(u * self.scale * 3.1, v * self.scale * 3.1,
                                 self.seed + 7)) / 1.5
        return self.base + self.amplitude * (n - 0.5) * 2.0


# --- primitives ----------------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    """Finite rectangle: origin corner plus two orthogonal edge vectors."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    texture: Texture = Texture()
    flat_region: tuple[float, float, float, float] | None = None  # u0,v0,u1,v1
    flat_albedo: float = 0.55
    name: str = "rect"

    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by min/max corners."""

    lo: np.ndarray
    hi: np.ndarray
    texture: Texture = Texture()
    name: str = "box"


@dataclass
class SceneSpec:
    """Primitives plus camera rig and render options."""

    rects: list[Rect] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    cameras: list[CameraParams] = field(default_factory=list)
    width: int = 320
    height: int = 240
    noise_sigma: float = 0.5 / 255.0
    rgb: bool = True
    corrupt_merge: tuple[int, int] | None = None  # primitive ids merged in a layer
    name: str = "scene"

    @property
    def n_primitives(self) -> int:
        return len(self.rects) + len(self.boxes)


def look_at_camera(center, target, fx, fy, cx, cy) -> CameraParams:
    """Camera at `center` looking toward `target` (z forward, y down-ish)."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, -1.0, 0.0])
    if abs(z @ up) > 0.99:
        up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    if np.linalg.det(r) < 0:
        r = np.stack([-x, y, z])
    return CameraParams(fx, fy, cx, cy, r, center)


def camera_line(n_views, target, distance, spacing, fx, fy, cx, cy,
                side_fov_scale=1.0):
    """Horizontal line of cameras aimed at a common target point.

    side_fov_scale < 1 widens the off-center cameras' field of view so the
    center view's frame stays fully co-visible despite the parallax.
    """
    cams = []
    mid = (n_views - 1) / 2.0
    target = np.asarray(target, dtype=np.float64)
    for i in range(n_views):
        c = target + np.array([(i - mid) * spacing, 0.0, -distance])
        scale = 1.0 if i == int(mid) and n_views % 2 == 1 else side_fov_scale
        cams.append(look_at_camera(c, target, fx * scale, fy * scale, cx, cy))
    return cams


# --- ray casting ------------------------------------------------------------------


def _hit_rect(rect: Rect, origins, dirs):
    """Ray-rectangle intersection; returns (t, u, v) with t=inf on miss."""
    n = rect.normal()
    denom = dirs @ n
    safe = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    t = ((rect.origin - origins) @ n) / safe
    pts = origins + t[..., None] * dirs
    rel = pts - rect.origin
    lu2 = rect.edge_u @ rect.edge_u
    lv2 = rect.edge_v @ rect.edge_v
    u = rel @ rect.edge_u / lu2
    v = rel @ rect.edge_v / lv2
    good = (np.abs(denom) > 1e-12) & (t > 1e-9) & \
        (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    return np.where(good, t, np.inf), u, v


def _hit_box(box: Box, origins, dirs):
    """Slab-method ray-AABB intersection; returns (t, face_id, u, v)."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t_lo = (box.lo - origins) * inv
    t_hi = (box.hi - origins) * inv
    t1 = np.minimum(t_lo, t_hi)
    t2 = np.maximum(t_lo, t_hi)
    t_near = t1.max(axis=-1)
    t_far = t2.min(axis=-1)
    hit = (t_near < t_far) & (t_near > 1e-9)
    axis = np.argmax(t1, axis=-1)
    t = np.where(hit, t_near, np.inf)
    pts = origins + t[..., None] * dirs
    sign = np.take_along_axis(np.sign(dirs), axis[..., None], -1)[..., 0]
    face = axis * 2 + (sign > 0)  # 0:-x 1:+x 2:-y 3:+y 4:-z 5:+z
    size = box.hi - box.lo
    local = (pts - box.lo) / size
    u = np.choose(axis, [local[..., 1], local[..., 0], local[..., 0]])
    v = np.choose(axis, [local[..., 2], local[..., 2], local[..., 1]])
    return t, face.astype(np.int32), u, v


def render(spec: SceneSpec, seed: int = 0):
    """Ray-cast the scene; returns (SceneBundle, gt maps, gt pyramids).

    Depth is exact z-depth of the nearest intersection, normals are the
    analytic primitive normals flipped camera-facing, masks label primitives
    (coarse), faces/texture regions (fine) and, when corrupt_merge is set, a
    middle layer that merges the two named primitives.
    """
    h, w = spec.height, spec.width
    images, gts, pyramids = [], [], []
    for view, cam in enumerate(spec.cameras):
        xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        dirs_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                             np.ones_like(xs)], axis=-1)
        dirs = dirs_cam @ cam.rotation  # R^T @ d per pixel
        origins = cam.center[None, None, :]

        best_t = np.full((h, w), np.inf)
        prim_id = np.full((h, w), -1, dtype=np.int32)
        face_id = np.zeros((h, w), dtype=np.int32)
        uu = np.zeros((h, w))
        vv = np.zeros((h, w))
        normal_w = np.zeros((h, w, 3))

        pid = 0
        for rect in spec.rects:
            t, u, v = _hit_rect(rect, origins, dirs)
            closer = t < best_t
            best_t[closer] = t[closer]
            prim_id[closer] = pid
            face_id[closer] = 0
            uu[closer] = u[closer]
            vv[closer] = v[closer]
            normal_w[closer] = rect.normal()
            pid += 1
        for box in spec.boxes:
            t, face, u, v = _hit_box(box, origins, dirs)
            closer = t < best_t
            best_t[closer] = t[closer]
            prim_id[closer] = pid
            face_id[closer] = face[closer]
            uu[closer] = u[closer]
            vv[closer] = v[closer]
            axis = face // 2
            sgn = np.where(face % 2 == 0, -1.0, 1.0)
            for a in range(3):
                sel = closer & (axis == a)
                n = np.zeros((h, w, 3))
                n[..., a] = sgn
                normal_w[sel] = n[sel]
            pid += 1

        if (prim_id < 0).any():
            raise ValueError("scene does not cover the full frame; add a backdrop")

        # depth = z-depth; rays are scaled so t equals it directly
        depth = np.where(np.isfinite(best_t), best_t, 0.0)

        # shade
        albedo = np.zeros((h, w))
        flat_mask = np.zeros((h, w), dtype=bool)
        pid = 0
        for rect in spec.rects:
            sel = prim_id == pid
            albedo[sel] = rect.texture.albedo(uu[sel], vv[sel])
            if rect.flat_region is not None:
                u0, v0, u1, v1 = rect.flat_region
                flat = sel & (uu >= u0) & (uu < u1) & (vv >= v0) & (vv < v1)
                albedo[flat] = rect.flat_albedo
                flat_mask |= flat
            pid += 1
        for box in spec.boxes:
            sel = prim_id == pid
            albedo[sel] = box.texture.albedo(uu[sel] + face_id[sel] * 17.0,
                                             vv[sel])
            pid += 1

        noise_rng = np.random.default_rng(derive_state(seed, 101, view))
        albedo = albedo + noise_rng.normal(0.0, spec.noise_sigma, size=(h, w))
        albedo = np.clip(albedo, 0.0, 1.0)
        if spec.rgb:
            tint = np.ones((h, w, 3))
            pid = 0
            for prim in [*spec.rects, *spec.boxes]:
                tint[prim_id == pid] = prim.texture.tint
                pid += 1
            data = np.clip(albedo[..., None] * tint, 0.0, 1.0).astype(np.float32)
            img = ImageBuffer(w, h, 3, data)
        else:
            img = ImageBuffer(w, h, 1, albedo.astype(np.float32))
        # quantize exactly as the on-disk 8-bit formats will
        q = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
        img = ImageBuffer(w, h, img.channels,
                          q.astype(np.float32) / np.float32(255))
        images.append(img)

        n_cam = normal_w @ cam.rotation.T
        flip = (n_cam * dirs_cam).sum(-1) > 0
        n_cam[flip] *= -1.0
        # keep float64 in memory so analytic consistency holds to 1e-9;
        # the PFM writer casts to float32 at the disk boundary
        gts.append(DepthNormalMap(w, h, depth, n_cam))

        coarse = prim_id.copy()
        fine_key = prim_id.astype(np.int64) * 64 + face_id
        fine_key = fine_key * 2 + flat_mask
        _, fine = np.unique(fine_key, return_inverse=True)
        fine = fine.reshape(h, w).astype(np.int32)
        layers = [coarse]
        if spec.corrupt_merge is not None:
            a, b = spec.corrupt_merge
            merged = prim_id.copy()
            merged[merged == b] = a
            _, merged = np.unique(merged, return_inverse=True)
            layers.append(merged.reshape(h, w).astype(np.int32))
        layers.append(fine)
        pyramids.append(MaskPyramid(layers))

    depth_lo = min(float(g.depth[g.depth > 0].min()) for g in gts)
    depth_hi = max(float(g.depth.max()) for g in gts)
    margin = 0.25 * (depth_hi - depth_lo) + 1e-3
    bundle = SceneBundle(list(spec.cameras), images, pyramids,
                         depth_range=(max(depth_lo - margin, 1e-3),
                                      depth_hi + margin))
    return bundle, gts, pyramids


# --- presets -------------------------------------------------------------------


def _frame_filling_rect(z: float, fov_halfwidth: float, aspect: float,
                        margin: float, texture: Texture, name: str,
                        flat_region=None, flat_albedo=0.55) -> Rect:
    half_w = fov_halfwidth * z * margin
    half_h = half_w / aspect
    return Rect(np.array([-half_w, -half_h, z]),
                np.array([2 * half_w, 0.0, 0.0]),
                np.array([0.0, 2 * half_h, 0.0]),
                texture, flat_region, flat_albedo, name)


def preset(name: str, width: int = 320, height: int = 240, views: int = 3,
           textureless_fraction: float = 0.35) -> SceneSpec:
    """Built-in scenes: fronto-plane, two-plane-step, textureless-wall, desk."""
    fx = fy = 0.9 * width
    cx, cy = width / 2.0 - 0.5, height / 2.0 - 0.5
    aspect = width / height
    fovw = (width / 2.0) / fx

    cells = width / 4.0  # ~4-pixel noise cells over the visible frame

    if name == "fronto-plane":
        wall = _frame_filling_rect(5.0, fovw, aspect, 2.6,
                                   Texture("noise", 0.5, 0.42, cells * 2.6, 3),
                                   "wall")
        cams = camera_line(views, [0, 0, 5.0], 5.0, 1.1, fx, fy, cx, cy,
                           side_fov_scale=0.62)
        return SceneSpec([wall], [], cams, width, height, name=name)

    if name == "textureless-wall":
        # size the flat insert so it covers textureless_fraction of the FRAME:
        # the wall extends margin-times beyond the visible span
        margin = 1.9
        side = math.sqrt(textureless_fraction) / margin
        lo, hi = 0.5 - side / 2.0, 0.5 + side / 2.0
        wall = _frame_filling_rect(5.0, fovw, aspect, margin,
                                   Texture("noise", 0.5, 0.42, cells * margin, 5),
                                   "wall", flat_region=(lo, lo, hi, hi))
        cams = camera_line(views, [0, 0, 5.0], 5.0, 0.7, fx, fy, cx, cy)
        return SceneSpec([wall], [], cams, width, height, name=name)

    if name == "two-plane-step":
        # near plane covers the left part, far plane the whole frame behind;
        # both carry textureless bands hugging the projected step edge
        far = _frame_filling_rect(6.5, fovw, aspect, 3.0,
                                  Texture("noise", 0.48, 0.4, cells * 3.0, 11,
                                          (1.0, 0.92, 0.85)), "far",
                                  flat_region=(0.42, 0.0, 0.55, 1.0),
                                  flat_albedo=0.5)
        half_w = fovw * 4.0 * 2.2
        half_h = half_w / aspect
        near = Rect(np.array([-half_w, -half_h, 4.0]),
                    np.array([half_w * 1.02, 0.0, 0.0]),
                    np.array([0.0, 2 * half_h, 0.0]),
                    Texture("noise", 0.55, 0.4, cells * 1.3, 12,
                            (0.85, 0.95, 1.0)),
                    flat_region=(0.75, 0.0, 1.0, 1.0), flat_albedo=0.6,
                    name="near")
        cams = camera_line(views, [0, 0, 5.0], 5.0, 0.6, fx, fy, cx, cy)
        return SceneSpec([far, near], [], cams, width, height,
                         corrupt_merge=(0, 1), name=name)

    if name == "desk":
        backdrop = _frame_filling_rect(8.0, fovw, aspect, 3.2,
                                       Texture("noise", 0.45, 0.4, cells * 3.2,
                                               21, (0.95, 0.95, 1.0)),
                                       "backdrop")
        side = math.sqrt(max(textureless_fraction, 0.3))
        board_hw = fovw * 5.0 * 0.62
        board_hh = board_hw / aspect * 0.78
        board = Rect(np.array([-board_hw, -board_hh, 5.0]),
                     np.array([2 * board_hw, 0.0, 0.0]),
                     np.array([0.0, 2 * board_hh, 0.0]),
                     Texture("noise", 0.55, 0.42, cells * 1.3, 22,
                             (1.0, 0.9, 0.8)),
                     flat_region=(0.62 - side * 0.62, 0.5 - side / 2.0,
                                  0.62 + side * 0.38, 0.5 + side / 2.0),
                     flat_albedo=0.58, name="board")
        box = Box(np.array([-3.1, -0.45, 5.8]), np.array([-2.0, 1.5, 6.9]),
                  Texture("noise", 0.5, 0.4, cells * 0.18, 23, (0.85, 1.0, 0.85)),
                  name="crate")
        cams = camera_line(views, [0, 0, 5.5], 5.5, 0.7, fx, fy, cx, cy)
        return SceneSpec([backdrop, board], [box], cams, width, height,
                         corrupt_merge=(0, 1), name=name)

    raise KeyError(f"unknown preset '{name}' (built-ins: fronto-plane, "
                   f"two-plane-step, textureless-wall, desk)")


PRESETS = ("fronto-plane", "two-plane-step", "textureless-wall", "desk")
