"""On-disk scene formats: cameras, images, mask pyramids, depth maps, clouds.

Formats (all little-endian unless stated):
  cameras.txt     one ASCII line per view:
                  ``view_id fx fy cx cy r11 r12 r13 r21 r22 r23 r31 r32 r33 cx cy cz``
                  Floats are written with repr() so parsing round-trips bit-exactly.
  images          binary netpbm: P5 (gray) or P6 (RGB), 8-bit, named
                  ``image_<view:04d>.pgm|ppm``; samples normalized to [0, 1].
  mask pyramids   ``masks_<view:04d>.manifest`` listing one raster path per
                  line, coarse to fine; each raster is a P5 PGM with
                  maxval 65535 (16-bit big-endian labels).
  depth maps      PFM ``Pf`` (grayscale float32, scale -1.0 = little-endian,
                  bottom-up scanlines); normals as 3-channel ``PF``.
  point clouds    binary_little_endian PLY with x,y,z,nx,ny,nz float32 and
                  red,green,blue uchar.
  depth_range.txt optional ``dmin dmax`` line giving the scene depth bounds.

Validity sentinel for depth maps is 0.0 (not NaN) so files compare equal
across platforms.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SceneFormatError

_ROT_TOL = 1e-6


@dataclass(frozen=True)
class CameraParams:
    """Pinhole camera: intrinsics in pixels, world-to-camera rotation, center."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) row-major, world -> camera
    center: np.ndarray    # (3,) world units

    def __post_init__(self):
        object.__setattr__(self, "rotation",
                           np.ascontiguousarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "center",
                           np.ascontiguousarray(self.center, dtype=np.float64))
        validate_camera(self)

    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


def validate_camera(cam: CameraParams) -> None:
    r = cam.rotation
    if r.shape != (3, 3):
        raise SceneFormatError("camera rotation must be 3x3")
    if np.abs(r.T @ r - np.eye(3)).max() >= _ROT_TOL:
        raise SceneFormatError("camera rotation is not orthonormal")
    if np.linalg.det(r) < 0.0:
        raise SceneFormatError("camera rotation must have determinant +1")
    if not (cam.fx > 0.0 and cam.fy > 0.0):
        raise SceneFormatError("focal lengths must be positive")


@dataclass
class ImageBuffer:
    """Row-major float32 samples in [0, 1]; 1 (gray) or 3 (RGB) channels."""

    width: int
    height: int
    channels: int
    data: np.ndarray  # (H, W) or (H, W, 3) float32

    @property
    def gray(self) -> np.ndarray:
        """Luma view used by the matching cost (Rec.601 for RGB)."""
        if self.channels == 1:
            return self.data
        return (0.299 * self.data[..., 0] + 0.587 * self.data[..., 1]
                + 0.114 * self.data[..., 2]).astype(np.float32)


@dataclass
class MaskPyramid:
    """Stacked label rasters, coarse to fine; labels contiguous 0..K-1."""

    layers: list[np.ndarray]  # each (H, W) int32

    @property
    def layer_count(self) -> int:
        return len(self.layers)


@dataclass
class DepthNormalMap:
    """Per-pixel depth (0 = invalid) and unit camera-frame normals."""

    width: int
    height: int
    depth: np.ndarray    # (H, W) float32 on disk; float64 allowed in memory
    normals: np.ndarray  # (H, W, 3) matching

    def valid_mask(self) -> np.ndarray:
        return self.depth > 0.0


@dataclass
class SceneBundle:
    """Everything load_scene reads: cameras, images, optional masks/range."""

    cameras: list[CameraParams]
    images: list[ImageBuffer]
    masks: list[MaskPyramid | None] = field(default_factory=list)
    depth_range: tuple[float, float] | None = None
    source_dir: Path | None = None

    @property
    def n_views(self) -> int:
        return len(self.cameras)


# --- netpbm -------------------------------------------------------------------

_PNM_HEADER = re.compile(rb"^(P[56])\s")


def _read_pnm_tokens(raw: bytes, count: int) -> tuple[list[int], int]:
    """Read `count` whitespace-separated ASCII integers after the magic,
    skipping # comments; returns (tokens, offset_past_single_whitespace)."""
    tokens: list[int] = []
    i = 2
    while len(tokens) < count:
        if i >= len(raw):
            raise SceneFormatError("truncated netpbm header")
        c = raw[i:i + 1]
        if c == b"#":
            while i < len(raw) and raw[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            tok = raw[i:j]
            if not tok.isdigit():
                raise SceneFormatError(f"bad netpbm header token {tok!r}")
            tokens.append(int(tok))
            i = j
    return tokens, i + 1  # exactly one whitespace byte before the payload


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Read a binary P5/P6 file; returns (uint8 or uint16 array, maxval)."""
    path = Path(path)
    raw = path.read_bytes()
    m = _PNM_HEADER.match(raw)
    if m is None:
        raise SceneFormatError(f"{path}: not a binary P5/P6 netpbm file")
    magic = m.group(1)
    (w, h, maxval), off = _read_pnm_tokens(raw, 3)
    channels = 3 if magic == b"P6" else 1
    if maxval <= 0 or maxval > 65535:
        raise SceneFormatError(f"{path}: unsupported maxval {maxval}")
    dtype = np.uint16 if maxval > 255 else np.uint8
    count = w * h * channels
    payload = raw[off:off + count * dtype().itemsize]
    if len(payload) != count * dtype().itemsize:
        raise SceneFormatError(f"{path}: truncated pixel payload")
    arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder(">"))
    arr = arr.astype(dtype)
    if channels == 3:
        arr = arr.reshape(h, w, 3)
    else:
        arr = arr.reshape(h, w)
    return arr, maxval


def write_pnm(path, arr: np.ndarray, maxval: int = 255) -> None:
    """Write binary P5 (2-D array) or P6 (H,W,3). 16-bit written big-endian."""
    path = Path(path)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
        h, w = arr.shape[:2]
    elif arr.ndim == 2:
        magic = b"P5"
        h, w = arr.shape
    else:
        raise SceneFormatError("write_pnm expects (H,W) or (H,W,3)")
    if arr.max(initial=0) > maxval:
        raise SceneFormatError("sample exceeds maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    header = magic + b"\n" + f"{w} {h}\n{maxval}\n".encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_image(path) -> ImageBuffer:
    arr, maxval = read_pnm(path)
    data = (arr.astype(np.float32) / np.float32(maxval))
    if arr.ndim == 3:
        return ImageBuffer(arr.shape[1], arr.shape[0], 3, data)
    return ImageBuffer(arr.shape[1], arr.shape[0], 1, data)


def save_image(path, img: ImageBuffer) -> None:
    arr = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    write_pnm(path, arr, maxval=255)


# --- cameras.txt ----------------------------------------------------------------


def load_cameras(path) -> list[CameraParams]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cameras.txt not found: {path}")
    cams: list[tuple[int, CameraParams]] = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        toks = line.split()
        if len(toks) != 17:
            raise SceneFormatError(f"{path}:{ln}: expected 17 fields, got {len(toks)}")
        vid = int(toks[0])
        vals = [float(t) for t in toks[1:]]
        cam = CameraParams(vals[0], vals[1], vals[2], vals[3],
                           np.array(vals[4:13]).reshape(3, 3),
                           np.array(vals[13:16]))
        cams.append((vid, cam))
    cams.sort(key=lambda t: t[0])
    if [vid for vid, _ in cams] != list(range(len(cams))):
        raise SceneFormatError(f"{path}: view ids must be contiguous from 0")
    return [cam for _, cam in cams]


def save_cameras(path, cams: list[CameraParams]) -> None:
    lines = []
    for vid, cam in enumerate(cams):
        vals = [cam.fx, cam.fy, cam.cx, cam.cy, *cam.rotation.ravel(), *cam.center]
        lines.append(" ".join([str(vid)] + [repr(float(v)) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n")


# --- mask pyramids ----------------------------------------------------------------


def load_mask_pyramid(manifest_path, expect_shape: tuple[int, int]) -> MaskPyramid:
    """Load the rasters listed in a manifest and validate them as a pyramid."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"mask manifest not found: {manifest_path}")
    layers = []
    for raw in manifest_path.read_text().splitlines():
        rel = raw.strip()
        if not rel or rel.startswith("#"):
            continue
        raster_path = manifest_path.parent / rel
        arr, maxval = read_pnm(raster_path)
        if arr.ndim != 2:
            raise SceneFormatError(f"{raster_path}: mask raster must be grayscale")
        layers.append(arr.astype(np.int32))
    if not layers:
        raise SceneFormatError(f"{manifest_path}: manifest lists no layers")
    pyr = MaskPyramid(layers)
    validate_mask_pyramid(pyr, expect_shape, name=str(manifest_path))
    return pyr


def validate_mask_pyramid(pyr: MaskPyramid, expect_shape: tuple[int, int],
                          name: str = "mask pyramid") -> None:
    h, w = expect_shape
    for i, layer in enumerate(pyr.layers):
        if layer.shape != (h, w):
            raise SceneFormatError(
                f"{name}: layer {i} is {layer.shape[1]}x{layer.shape[0]}, "
                f"image is {w}x{h}")
        if layer.min() < 0:
            raise SceneFormatError(f"{name}: layer {i} has negative labels")
        k = int(layer.max()) + 1
        present = np.unique(layer)
        if len(present) != k:
            raise SceneFormatError(f"{name}: layer {i} labels are not contiguous 0..K-1")


def save_mask_pyramid(scene_dir, view_id: int, pyr: MaskPyramid) -> Path:
    scene_dir = Path(scene_dir)
    rel_paths = []
    for i, layer in enumerate(pyr.layers):
        if layer.max(initial=0) > 65535:
            raise SceneFormatError("mask layer exceeds 65535 labels")
        rel = f"mask_{view_id:04d}_layer{i}.pgm"
        write_pnm(scene_dir / rel, layer.astype(np.uint16), maxval=65535)
        rel_paths.append(rel)
    manifest = scene_dir / f"masks_{view_id:04d}.manifest"
    manifest.write_text("\n".join(rel_paths) + "\n")
    return manifest


# --- PFM ---------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Write float32 data as PFM: Pf for (H,W), PF for (H,W,3)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        magic = b"Pf"
        h, w = data.shape
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"PF"
        h, w = data.shape[:2]
    else:
        raise SceneFormatError("PFM data must be (H,W) or (H,W,3)")
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale = little-endian
        f.write(np.ascontiguousarray(data[::-1]).tobytes())  # bottom-up rows


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"Pf", b"PF"):
            raise SceneFormatError(f"{path}: not a PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise SceneFormatError(f"{path}: bad PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        channels = 3 if magic == b"PF" else 1
        count = w * h * channels
        payload = f.read(count * 4)
    if len(payload) != count * 4:
        raise SceneFormatError(f"{path}: truncated PFM payload")
    endian = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload, dtype=endian).astype(np.float32)
    arr = arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)
    return np.ascontiguousarray(arr[::-1])


def write_depth_pfm(dn: DepthNormalMap, path) -> None:
    """Depth to grayscale PFM; bit-identical through read_depth_pfm."""
    write_pfm(path, dn.depth)


def read_depth_pfm(path) -> np.ndarray:
    arr = read_pfm(path)
    if arr.ndim != 2:
        raise SceneFormatError(f"{path}: expected grayscale depth PFM")
    return arr


def write_normal_pfm(dn: DepthNormalMap, path) -> None:
    write_pfm(path, dn.normals)


def read_normal_pfm(path) -> np.ndarray:
    arr = read_pfm(path)
    if arr.ndim != 3:
        raise SceneFormatError(f"{path}: expected 3-channel normal PFM")
    return arr


# --- PLY ----------------------------------------------------------------------------

_PLY_PROPS = ("x", "y", "z", "nx", "ny", "nz")


def write_ply_points(path, xyz: np.ndarray, normals: np.ndarray,
                     colors: np.ndarray) -> int:
    """Binary little-endian PLY; colors are uint8 (N,3). Returns vertex count."""
    n = len(xyz)
    if n == 0:
        raise ValueError("no valid points to export")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header += ["property uchar red", "property uchar green", "property uchar blue",
               "end_header"]
    rec = np.zeros(n, dtype=[("f", "<f4", 6), ("c", "u1", 3)])
    rec["f"][:, 0:3] = xyz
    rec["f"][:, 3:6] = normals
    rec["c"] = colors
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        f.write(rec.tobytes())
    return n


def read_ply_points(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read PLY files produced by write_ply_points (that subset only)."""
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise SceneFormatError(f"{path}: not a PLY file")
        n = None
        while True:
            line = f.readline()
            if not line:
                raise SceneFormatError(f"{path}: missing end_header")
            if line.startswith(b"element vertex"):
                n = int(line.split()[-1])
            if line.strip() == b"end_header":
                break
        if n is None:
            raise SceneFormatError(f"{path}: no vertex element")
        rec = np.frombuffer(f.read(n * 27), dtype=[("f", "<f4", 6), ("c", "u1", 3)])
    if len(rec) != n:
        raise SceneFormatError(f"{path}: truncated vertex payload")
    return (rec["f"][:, 0:3].astype(np.float64),
            rec["f"][:, 3:6].astype(np.float64),
            rec["c"].copy())


def back_project(dn: DepthNormalMap, cam: CameraParams):
    """World-frame points/normals for valid pixels; returns (xyz, n, iy, ix)."""
    iy, ix = np.nonzero(dn.depth > 0.0)
    d = dn.depth[iy, ix].astype(np.float64)
    rx = (ix - cam.cx) / cam.fx
    ry = (iy - cam.cy) / cam.fy
    pts_cam = np.stack([rx * d, ry * d, d], axis=1)
    xyz = pts_cam @ cam.rotation + cam.center  # R^T @ p == p @ R
    n_world = dn.normals[iy, ix].astype(np.float64) @ cam.rotation
    return xyz, n_world, iy, ix


def export_point_cloud(maps: list[DepthNormalMap], cameras: list[CameraParams],
                       images: list[ImageBuffer], path) -> int:
    """Back-project every valid pixel of every view into one PLY file.

    Returns the vertex count; raises ValueError when no pixel is valid.
    """
    if not (len(maps) == len(cameras) == len(images)):
        raise ValueError("maps, cameras and images must have equal lengths")
    if not maps:
        raise ValueError("no valid points to export")
    all_xyz, all_n, all_c = [], [], []
    for dn, cam, img in zip(maps, cameras, images):
        xyz, n_world, iy, ix = back_project(dn, cam)
        if len(xyz) == 0:
            continue
        if img.channels == 3:
            col = img.data[iy, ix]
        else:
            col = np.repeat(img.data[iy, ix, None], 3, axis=1)
        all_xyz.append(xyz)
        all_n.append(n_world)
        all_c.append(np.clip(np.rint(col * 255.0), 0, 255).astype(np.uint8))
    if not all_xyz:
        raise ValueError("no valid points to export")
    return write_ply_points(path, np.concatenate(all_xyz), np.concatenate(all_n),
                            np.concatenate(all_c))


# --- scene bundle --------------------------------------------------------------------


def _find_image(scene_dir: Path, vid: int) -> Path:
    for ext in ("pgm", "ppm"):
        p = scene_dir / f"image_{vid:04d}.{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"image for view {vid} not found in {scene_dir}")


def load_scene(dir_path) -> SceneBundle:
    """Load cameras.txt, per-view images, optional masks and depth range.

    Raises FileNotFoundError naming the missing file, or SceneFormatError on
    dimension mismatches and malformed contents.
    """
    scene_dir = Path(dir_path)
    if not scene_dir.is_dir():
        raise FileNotFoundError(f"scene directory not found: {scene_dir}")
    cams = load_cameras(scene_dir / "cameras.txt")
    images, masks = [], []
    for vid in range(len(cams)):
        img = load_image(_find_image(scene_dir, vid))
        images.append(img)
        manifest = scene_dir / f"masks_{vid:04d}.manifest"
        if manifest.exists():
            masks.append(load_mask_pyramid(manifest, (img.height, img.width)))
        else:
            masks.append(None)
    for vid, (cam, img) in enumerate(zip(cams, images)):
        if not (0 <= cam.cx < img.width and 0 <= cam.cy < img.height):
            raise SceneFormatError(f"view {vid}: principal point outside image")
    depth_range = None
    range_file = scene_dir / "depth_range.txt"
    if range_file.exists():
        toks = range_file.read_text().split()
        if len(toks) != 2:
            raise SceneFormatError(f"{range_file}: expected 'dmin dmax'")
        depth_range = (float(toks[0]), float(toks[1]))
        if not (0.0 < depth_range[0] < depth_range[1]):
            raise SceneFormatError(f"{range_file}: invalid depth range")
    return SceneBundle(cams, images, masks, depth_range, scene_dir)


def save_scene(dir_path, bundle: SceneBundle) -> None:
    """Write a bundle in the exact formats load_scene reads."""
    scene_dir = Path(dir_path)
    scene_dir.mkdir(parents=True, exist_ok=True)
    save_cameras(scene_dir / "cameras.txt", bundle.cameras)
    for vid, img in enumerate(bundle.images):
        ext = "ppm" if img.channels == 3 else "pgm"
        save_image(scene_dir / f"image_{vid:04d}.{ext}", img)
    for vid, pyr in enumerate(bundle.masks):
        if pyr is not None:
            save_mask_pyramid(scene_dir, vid, pyr)
    if bundle.depth_range is not None:
        (scene_dir / "depth_range.txt").write_text(
            f"{bundle.depth_range[0]!r} {bundle.depth_range[1]!r}\n")
