"""Input validation helpers shared by the loaders, the estimator facade and
the CLI. Each check raises SceneFormatError/ValueError with a message naming
the offending field; check_scene_bundle is the one-stop entry point."""

from __future__ import annotations

import numpy as np

from .errors import SceneFormatError
from .scene_io import (CameraParams, DepthNormalMap, ImageBuffer, MaskPyramid,
                       SceneBundle, validate_camera, validate_mask_pyramid)


def check_image_buffer(img: ImageBuffer, name: str = "image") -> None:
    expect = (img.height, img.width) if img.channels == 1 else \
        (img.height, img.width, 3)
    if img.channels not in (1, 3):
        raise SceneFormatError(f"{name}: channels must be 1 or 3")
    if img.data.shape != expect:
        raise SceneFormatError(f"{name}: data shape {img.data.shape} != {expect}")
    if img.data.size and (img.data.min() < 0.0 or img.data.max() > 1.0):
        raise SceneFormatError(f"{name}: samples must lie in [0, 1]")


def check_depth_normal_map(dn: DepthNormalMap, name: str = "depth map") -> None:
    if dn.depth.shape != (dn.height, dn.width):
        raise SceneFormatError(f"{name}: depth shape mismatch")
    if dn.normals.shape != (dn.height, dn.width, 3):
        raise SceneFormatError(f"{name}: normals shape mismatch")
    if (dn.depth < 0).any():
        raise SceneFormatError(f"{name}: negative depths (0 marks invalid)")
    valid = dn.depth > 0
    if valid.any():
        norms = np.linalg.norm(dn.normals[valid], axis=-1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise SceneFormatError(f"{name}: normals of valid pixels must be unit")


def check_scene_bundle(bundle: SceneBundle) -> SceneBundle:
    """Validate every camera, image and mask pyramid; returns the bundle."""
    if bundle.n_views < 2:
        raise SceneFormatError("bundle needs at least 2 views")
    if len(bundle.images) != bundle.n_views:
        raise SceneFormatError("images and cameras disagree on view count")
    for v, (cam, img) in enumerate(zip(bundle.cameras, bundle.images)):
        validate_camera(cam)
        check_image_buffer(img, name=f"view {v} image")
        if not (0 <= cam.cx < img.width and 0 <= cam.cy < img.height):
            raise SceneFormatError(f"view {v}: principal point outside image")
    if bundle.masks:
        for v, pyr in enumerate(bundle.masks):
            if pyr is None:
                continue
            img = bundle.images[v]
            validate_mask_pyramid(pyr, (img.height, img.width),
                                  name=f"view {v} masks")
    if bundle.depth_range is not None:
        lo, hi = bundle.depth_range
        if not (0 < lo < hi):
            raise SceneFormatError("depth range must satisfy 0 < min < max")
    return bundle
