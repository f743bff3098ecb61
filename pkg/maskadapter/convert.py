#!/usr/bin/env python3
"""Convert external segmentation exports into mask-pyramid manifests.

Input layout (one view):
    IN_DIR/
      level_0/            # coarsest granularity
        mask_*.png        # binary masks (any nonzero pixel = inside), OR
        labels.png        # a single labeled raster instead of binary masks
      level_1/ ...        # finer levels, same structure

or, for several views, IN_DIR/view_0000/level_0/... etc. Rasters may be
8/16-bit grayscale PNG, binary PGM (P5) or .npy arrays; all rasters of a
view must share dimensions.

Binary masks composite into one label raster per level. Overlaps resolve by
mask area: at coarse levels (first half of the pyramid) the larger mask
wins, at fine levels the smaller one; uncovered pixels get background
label 0. Output is the depth-engine's mask format: a ``masks_<view>.manifest``
listing one 16-bit big-endian PGM per level, coarse to fine. Conversion is
deterministic: identical inputs give byte-identical outputs.

Usage:
    convert.py --in DIR --out DIR --levels 3 [--view 0]
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

MAX_LABELS = 65534  # labels above this cannot fit the 16-bit raster format


class ConversionError(RuntimeError):
    pass


def read_raster(path: Path) -> np.ndarray:
    """Grayscale raster as a 2-D integer array (PNG / PGM / NPY)."""
    suffix = path.suffix.lower()
    if suffix == ".npy":
        arr = np.load(path)
    elif suffix in (".png", ".pgm", ".tif", ".tiff"):
        from PIL import Image
        with Image.open(path) as im:
            if im.mode not in ("L", "I", "I;16", "1"):
                im = im.convert("I")
            arr = np.asarray(im)
    else:
        raise ConversionError(f"{path}: unsupported raster type '{suffix}'")
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ConversionError(f"{path}: expected a 2-D raster, got {arr.shape}")
    return arr.astype(np.int64)


def composite_binary_masks(masks: list[tuple[str, np.ndarray]],
                           smaller_wins: bool) -> np.ndarray:
    """Paint binary masks into one label raster, labels 1..K by sorted name.

    Paint order puts the winning mask last: ascending area when the smaller
    mask should win the overlap, descending otherwise. Ties break by
    filename so output is deterministic.
    """
    shape = masks[0][1].shape
    out = np.zeros(shape, dtype=np.int64)
    labeled = sorted(masks, key=lambda kv: kv[0])
    # paint so the winner of an overlap lands last
    order = sorted(range(len(labeled)),
                   key=lambda i: (int((labeled[i][1] != 0).sum()), labeled[i][0]),
                   reverse=smaller_wins)
    for i in order:
        name, mask = labeled[i]
        out[mask != 0] = i + 1
    return out


def compact_labels(raster: np.ndarray) -> np.ndarray:
    """Relabel to contiguous 0..K-1 (background, when present, stays 0)."""
    _, out = np.unique(raster, return_inverse=True)
    return out.reshape(raster.shape).astype(np.int64)


def write_pgm16(path: Path, raster: np.ndarray) -> None:
    header = f"P5\n{raster.shape[1]} {raster.shape[0]}\n65535\n".encode()
    path.write_bytes(header + raster.astype(">u2").tobytes())


def load_level(level_dir: Path) -> np.ndarray:
    """One level directory -> labeled raster (not yet compacted)."""
    labeled = sorted(level_dir.glob("labels.*"))
    if labeled:
        return read_raster(labeled[0])
    mask_files = sorted(p for p in level_dir.iterdir()
                        if p.is_file() and p.stem.startswith("mask"))
    if not mask_files:
        raise ConversionError(f"{level_dir}: no labels.* or mask_* rasters")
    rasters = [(p.name, read_raster(p)) for p in mask_files]
    shapes = {r.shape for _, r in rasters}
    if len(shapes) > 1:
        raise ConversionError(f"{level_dir}: masks disagree on dimensions "
                              f"{sorted(shapes)}")
    return rasters  # composited later, once the level index is known


def convert_view(view_dir: Path, out_dir: Path, levels: int, view_id: int) -> Path:
    """Convert one view's level directories; returns the manifest path."""
    level_dirs = [view_dir / f"level_{k}" for k in range(levels)]
    for d in level_dirs:
        if not d.is_dir():
            raise ConversionError(f"missing level directory: {d}")
    rasters = []
    for k, d in enumerate(level_dirs):
        loaded = load_level(d)
        if isinstance(loaded, list):
            smaller_wins = k >= (levels + 1) // 2  # fine half of the pyramid
            raster = composite_binary_masks(loaded, smaller_wins)
        else:
            raster = loaded
        raster = compact_labels(raster)
        n_labels = int(raster.max()) + 1
        if n_labels - 1 > MAX_LABELS:
            raise ConversionError(
                f"level {k}: {n_labels - 1} labels exceed the 16-bit limit "
                f"({MAX_LABELS})")
        rasters.append(raster)
    shapes = {r.shape for r in rasters}
    if len(shapes) > 1:
        raise ConversionError(f"levels disagree on dimensions: {sorted(shapes)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    rel_paths = []
    for k, raster in enumerate(rasters):
        rel = f"mask_{view_id:04d}_layer{k}.pgm"
        write_pgm16(out_dir / rel, raster)
        rel_paths.append(rel)
    manifest = out_dir / f"masks_{view_id:04d}.manifest"
    manifest.write_text("\n".join(rel_paths) + "\n")
    return manifest


def convert(in_dir, out_dir, levels: int, view: int = 0) -> list[Path]:
    """Convert a directory tree; returns the manifest paths written."""
    in_dir = Path(in_dir)
    out_dir = Path(out_dir)
    if levels < 1:
        raise ConversionError("levels must be >= 1")
    if not in_dir.is_dir():
        raise ConversionError(f"input directory not found: {in_dir}")
    view_dirs = sorted(d for d in in_dir.iterdir()
                       if d.is_dir() and re.fullmatch(r"view_\d+", d.name))
    written = []
    if view_dirs:
        for d in view_dirs:
            vid = int(d.name.split("_")[1])
            written.append(convert_view(d, out_dir, levels, vid))
    else:
        written.append(convert_view(in_dir, out_dir, levels, view))
    return written


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--in", dest="in_dir", required=True, metavar="DIR")
    ap.add_argument("--out", dest="out_dir", required=True, metavar="DIR")
    ap.add_argument("--levels", type=int, default=3)
    ap.add_argument("--view", type=int, default=0,
                    help="view id when the input holds a single view")
    args = ap.parse_args(argv)
    try:
        written = convert(args.in_dir, args.out_dir, args.levels, args.view)
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
