"""Command line interface.

Verbs:
  reconstruct    depth maps + fused point cloud for a scene directory
  synth          generate a synthetic scene with analytic ground truth
  eval           accuracy / completeness / F1 of a reconstruction against GT
  masks-validate validate mask-pyramid manifests

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Every
reconstruct run writes a manifest.json sufficient to reproduce it bit-exactly
and, with --diagnostics, a per-iteration CSV
(view,iteration,reliable_fraction,mean_cost).
Thread count comes from --threads, else the MSP_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ABLATIONS, EngineConfig, apply_ablations
from .engine import fuse, reconstruct
from .errors import SceneFormatError
from .scene_io import (DepthNormalMap, load_mask_pyramid, load_scene,
                       read_ply_points, read_depth_pfm, save_mask_pyramid,
                       save_scene, write_depth_pfm, write_normal_pfm,
                       write_ply_points, back_project)
from .synth import PRESETS, preset, render
from .validation import check_scene_bundle

logger = logging.getLogger("deformmvs")

_CONFIG_CLI_FIELDS = ("iterations", "seed", "mu", "window_size",
                      "depth_min", "depth_max", "sigma_color")


def _set_threads(args) -> int:
    n = args.threads
    if n is None:
        env = os.environ.get("MSP_THREADS")
        n = int(env) if env else 0
    if n and n > 0:
        from numba import set_num_threads
        set_num_threads(n)
        return n
    return 0


def _load_config_file(path) -> dict:
    """Flat key=value lines; '#' comments; values parsed as python literals
    where possible."""
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SceneFormatError(f"{path}:{ln}: expected key=value")
        key, val = (t.strip() for t in line.split("=", 1))
        if val.lower() in ("true", "false"):
            out[key] = val.lower() == "true"
        else:
            try:
                out[key] = int(val)
            except ValueError:
                try:
                    out[key] = float(val)
                except ValueError:
                    out[key] = val
    return out


def _build_config(args) -> EngineConfig:
    base = {}
    if getattr(args, "config", None):
        base = _load_config_file(args.config)
    cfg = EngineConfig.from_dict(base) if base else EngineConfig()
    for name in _CONFIG_CLI_FIELDS:
        val = getattr(args, name.replace("-", "_"), None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "ablate", None):
        apply_ablations(cfg, args.ablate)
    cfg.validate()
    return cfg


def cmd_reconstruct(args) -> int:
    threads = _set_threads(args)
    scene_dir = Path(args.scene)
    if not scene_dir.is_dir():
        print(f"error: scene directory not found: {scene_dir}", file=sys.stderr)
        return 2
    try:
        cfg = _build_config(args)
    except (KeyError, ValueError, SceneFormatError) as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = "load"
    timings: dict[str, float] = {}
    try:
        t0 = time.time()
        bundle = check_scene_bundle(load_scene(scene_dir))
        timings["load"] = time.time() - t0
        views = [args.ref_view] if args.ref_view is not None \
            else list(range(bundle.n_views))
        maps: list[DepthNormalMap] = []
        diag_rows = []
        stage = "reconstruct"
        t0 = time.time()
        for v in views:
            res = reconstruct(bundle, v, cfg)
            maps.append(res.depth_map)
            write_depth_pfm(res.depth_map, out_dir / f"depth_{v:04d}.pfm")
            write_normal_pfm(res.depth_map, out_dir / f"normal_{v:04d}.pfm")
            for s in res.stats:
                diag_rows.append((v, s.iteration, s.reliable_fraction,
                                  s.mean_cost))
        timings["reconstruct"] = time.time() - t0
        stage = "fuse"
        t0 = time.time()
        count = 0
        if len(views) >= 2:
            cams = [bundle.cameras[v] for v in views]
            imgs = [bundle.images[v] for v in views]
            xyz, nrm, col = fuse(maps, cams, imgs, cfg.fuse_consistency_views,
                                 cfg.fuse_depth_tol, cfg.fuse_angle_tol_deg)
            if len(xyz):
                count = write_ply_points(out_dir / "fused.ply", xyz, nrm, col)
        timings["fuse"] = time.time() - t0
        stage = "write"
        if args.diagnostics:
            with open(out_dir / "diagnostics.csv", "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow(["view", "iteration", "reliable_fraction",
                             "mean_cost"])
                wr.writerows(diag_rows)
        manifest = {
            "version": __version__,
            "command": "reconstruct",
            "scene": str(scene_dir),
            "out": str(out_dir),
            "seed": cfg.seed,
            "views": views,
            "ablations": sorted(args.ablate or []),
            "threads": threads,
            "config": cfg.to_dict(),
            "fused_points": count,
            "timings": {k: round(v, 3) for k, v in timings.items()},
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                          sort_keys=True))
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error during {stage}: {exc}", file=sys.stderr)
        return 1
    print(f"reconstructed {len(views)} view(s), fused {count} points -> {out_dir}")
    return 0


def cmd_synth(args) -> int:
    if args.preset not in PRESETS:
        print(f"error: unknown preset '{args.preset}'. built-ins: "
              f"{', '.join(PRESETS)}", file=sys.stderr)
        return 2
    try:
        width, height = (int(t) for t in args.size.lower().split("x"))
    except ValueError:
        print(f"error: bad --size '{args.size}', expected WxH", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    try:
        spec = preset(args.preset, width, height, args.views,
                      args.textureless_fraction)
        bundle, gts, pyramids = render(spec, seed=args.seed)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_scene(out_dir, bundle)
        for v, gt in enumerate(gts):
            write_depth_pfm(gt, out_dir / f"gt_depth_{v:04d}.pfm")
            write_normal_pfm(gt, out_dir / f"gt_normal_{v:04d}.pfm")
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote scene '{args.preset}' ({width}x{height}, "
          f"{bundle.n_views} views) -> {out_dir}")
    return 0


def _gt_cloud(gt_dir: Path) -> np.ndarray:
    bundle = load_scene(gt_dir)
    pts = []
    for v, cam in enumerate(bundle.cameras):
        path = gt_dir / f"gt_depth_{v:04d}.pfm"
        if not path.exists():
            continue
        depth = read_depth_pfm(path)
        h, w = depth.shape
        dn = DepthNormalMap(w, h, depth, np.zeros((h, w, 3), np.float32))
        xyz, _, _, _ = back_project(dn, cam)
        pts.append(xyz)
    if not pts:
        raise FileNotFoundError(f"no gt_depth_*.pfm found in {gt_dir}")
    return np.concatenate(pts)


def cmd_eval(args) -> int:
    recon = Path(args.recon)
    gt_dir = Path(args.gt)
    ply = recon / "fused.ply"
    if not ply.exists():
        print(f"error: {ply} not found", file=sys.stderr)
        return 2
    try:
        gt = _gt_cloud(gt_dir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        from scipy.spatial import cKDTree
        xyz, _, _ = read_ply_points(ply)
        rows = []
        if len(xyz) == 0:
            for tau in args.tau:
                rows.append((tau, 0.0, 0.0, 0.0))
        else:
            tree_gt = cKDTree(gt)
            tree_out = cKDTree(xyz)
            d_out, _ = tree_gt.query(xyz, k=1)
            d_gt, _ = tree_out.query(gt, k=1)
            for tau in args.tau:
                acc = float((d_out <= tau).mean())
                comp = float((d_gt <= tau).mean())
                f1 = 0.0 if acc + comp == 0 else 2 * acc * comp / (acc + comp)
                rows.append((tau, acc, comp, f1))
        out = csv.writer(sys.stdout)
        out.writerow(["tau", "accuracy", "completeness", "f1"])
        for row in rows:
            out.writerow([f"{x:.6g}" for x in row])
        if args.out:
            with open(args.out, "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow(["tau", "accuracy", "completeness", "f1"])
                for row in rows:
                    wr.writerow([f"{x:.6g}" for x in row])
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def cmd_masks_validate(args) -> int:
    try:
        if args.scene:
            scene_dir = Path(args.scene)
            if not scene_dir.is_dir():
                print(f"error: scene directory not found: {scene_dir}",
                      file=sys.stderr)
                return 2
            bundle = load_scene(scene_dir)
            n = sum(1 for m in bundle.masks if m is not None)
            if n == 0:
                print("error: scene has no mask manifests", file=sys.stderr)
                return 2
            print(f"ok: {n} mask pyramid(s) valid")
            return 0
        if args.manifest:
            if not args.size:
                print("error: --manifest requires --size WxH", file=sys.stderr)
                return 2
            w, h = (int(t) for t in args.size.lower().split("x"))
            pyr = load_mask_pyramid(args.manifest, (h, w))
            print(f"ok: {pyr.layer_count} layer(s) valid")
            return 0
        print("error: give --scene DIR or --manifest FILE --size WxH",
              file=sys.stderr)
        return 2
    except (FileNotFoundError, SceneFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deformmvs", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)

    rec = sub.add_parser("reconstruct", help="reconstruct a scene directory")
    rec.add_argument("--scene", required=True)
    rec.add_argument("--out", required=True)
    rec.add_argument("--config", help="key=value config file")
    rec.add_argument("--seed", type=int)
    rec.add_argument("--iterations", type=int)
    rec.add_argument("--mu", type=int)
    rec.add_argument("--window-size", type=int, dest="window_size")
    rec.add_argument("--sigma-color", type=float, dest="sigma_color")
    rec.add_argument("--depth-min", type=float, dest="depth_min")
    rec.add_argument("--depth-max", type=float, dest="depth_max")
    rec.add_argument("--ref-view", type=int, dest="ref_view",
                     help="reconstruct a single view only")
    rec.add_argument("--threads", type=int)
    rec.add_argument("--diagnostics", action="store_true")
    rec.add_argument("--ablate", nargs="+", metavar="NAME",
                     help=f"ablations: {', '.join(sorted(ABLATIONS))}, all")
    rec.set_defaults(func=cmd_reconstruct)

    syn = sub.add_parser("synth", help="generate a synthetic scene")
    syn.add_argument("--preset", required=True)
    syn.add_argument("--out", required=True)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--size", default="320x240")
    syn.add_argument("--views", type=int, default=3)
    syn.add_argument("--textureless-fraction", type=float, default=0.35,
                     dest="textureless_fraction")
    syn.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="evaluate reconstruction against GT")
    ev.add_argument("--recon", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--tau", type=float, nargs="+", default=[0.02, 0.05, 0.1])
    ev.add_argument("--out", help="also write CSV here")
    ev.set_defaults(func=cmd_eval)

    mv = sub.add_parser("masks-validate", help="validate mask manifests")
    mv.add_argument("--scene")
    mv.add_argument("--manifest")
    mv.add_argument("--size", help="WxH, required with --manifest")
    mv.set_defaults(func=cmd_masks_validate)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
