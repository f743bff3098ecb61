import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from deformmvs.cli import main
from deformmvs.scene_io import read_depth_pfm, read_ply_points


def _hash_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


FAST = ["--iterations", "2", "--seed", "7", "--sigma-color", "0.35"]


@pytest.fixture(scope="module")
def tiny_scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    rc = main(["synth", "--preset", "fronto-plane", "--out", str(d),
               "--size", "64x48", "--views", "3", "--seed", "5"])
    assert rc == 0
    return d


@pytest.fixture(scope="module")
def recon_dir(tiny_scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("recon")
    rc = main(["reconstruct", "--scene", str(tiny_scene_dir), "--out", str(out),
               "--diagnostics", *FAST])
    assert rc == 0
    return out


class TestSynth:
    def test_scene_loadable_and_complete(self, tiny_scene_dir):
        files = {p.name for p in tiny_scene_dir.iterdir()}
        assert "cameras.txt" in files
        assert "image_0000.ppm" in files or "image_0000.pgm" in files
        assert "gt_depth_0001.pfm" in files
        assert "masks_0000.manifest" in files
        assert "depth_range.txt" in files

    def test_same_seed_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert main(["synth", "--preset", "two-plane-step", "--out", str(d),
                         "--size", "48x36", "--views", "2", "--seed", "9"]) == 0
        for fa in sorted(a.iterdir()):
            assert _hash_file(fa) == _hash_file(b / fa.name), fa.name

    def test_unknown_preset_exit_2(self, capsys):
        assert main(["synth", "--preset", "nope", "--out", "/tmp/x"]) == 2
        assert "built-ins" in capsys.readouterr().err

    def test_textureless_fraction_area(self, tmp_path):
        d = tmp_path / "tw"
        assert main(["synth", "--preset", "textureless-wall", "--out", str(d),
                     "--size", "160x120", "--views", "3", "--seed", "3",
                     "--textureless-fraction", "0.4"]) == 0
        from deformmvs.scene_io import load_scene
        bundle = load_scene(d)
        img = bundle.images[1].gray
        fine = bundle.masks[1].layers[-1]
        stds = {int(l): (float(img[fine == l].std()), float((fine == l).mean()))
                for l in np.unique(fine)}
        flat_label = min(stds, key=lambda l: stds[l][0])
        assert abs(stds[flat_label][1] - 0.4) < 0.02


class TestReconstruct:
    def test_outputs_present(self, recon_dir):
        names = {p.name for p in recon_dir.iterdir()}
        assert {"depth_0000.pfm", "depth_0001.pfm", "depth_0002.pfm",
                "normal_0001.pfm", "fused.ply", "manifest.json",
                "diagnostics.csv"} <= names

    def test_manifest_contents(self, recon_dir):
        m = json.loads((recon_dir / "manifest.json").read_text())
        assert m["seed"] == 7
        assert m["config"]["iterations"] == 2
        assert m["views"] == [0, 1, 2]
        assert set(m["timings"]) >= {"load", "reconstruct", "fuse"}

    def test_diagnostics_schema(self, recon_dir):
        lines = (recon_dir / "diagnostics.csv").read_text().splitlines()
        assert lines[0] == "view,iteration,reliable_fraction,mean_cost"
        assert len(lines) == 1 + 3 * 2  # 3 views x 2 iterations

    def test_determinism_identical_hashes(self, tiny_scene_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out, threads in ((a, "1"), (b, "2")):
            rc = main(["reconstruct", "--scene", str(tiny_scene_dir), "--out",
                       str(out), "--threads", threads, *FAST])
            assert rc == 0
        for name in ("depth_0000.pfm", "depth_0001.pfm", "fused.ply"):
            assert _hash_file(a / name) == _hash_file(b / name), name

    def test_missing_scene_exit_2(self):
        assert main(["reconstruct", "--scene", "/nonexistent", "--out",
                     "/tmp/o"]) == 2

    def test_bad_ablation_exit_2(self, tiny_scene_dir, tmp_path):
        rc = main(["reconstruct", "--scene", str(tiny_scene_dir), "--out",
                   str(tmp_path / "o"), "--ablate", "no-such"])
        assert rc == 2

    def test_ablation_recorded_and_changes_output(self, tiny_scene_dir, tmp_path):
        base, abl = tmp_path / "base", tmp_path / "abl"
        assert main(["reconstruct", "--scene", str(tiny_scene_dir), "--out",
                     str(base), "--ref-view", "1", *FAST]) == 0
        assert main(["reconstruct", "--scene", str(tiny_scene_dir), "--out",
                     str(abl), "--ref-view", "1", "--ablate", "no-syn",
                     *FAST]) == 0
        m = json.loads((abl / "manifest.json").read_text())
        assert m["ablations"] == ["no-syn"]
        assert not m["config"]["sampling_opt"]

    def test_mu_wiring_manifest_verified(self, tiny_scene_dir, tmp_path):
        out3, out5 = tmp_path / "mu3", tmp_path / "mu5"
        for out, mu in ((out3, "3"), (out5, "5")):
            assert main(["reconstruct", "--scene", str(tiny_scene_dir), "--out",
                         str(out), "--ref-view", "1", "--mu", mu, *FAST]) == 0
        m3 = json.loads((out3 / "manifest.json").read_text())
        m5 = json.loads((out5 / "manifest.json").read_text())
        assert m3["config"]["mu"] == 3 and m5["config"]["mu"] == 5
        diff = {k for k in m3["config"] if m3["config"][k] != m5["config"][k]}
        assert diff == {"mu"}  # runs differ only through the sequence length

    def test_config_file_with_cli_override(self, tiny_scene_dir, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("iterations = 1\nmu = 7\nsigma_color = 0.35\n")
        out = tmp_path / "o"
        assert main(["reconstruct", "--scene", str(tiny_scene_dir), "--out",
                     str(out), "--config", str(cfg), "--ref-view", "1",
                     "--iterations", "2", "--seed", "7"]) == 0
        m = json.loads((out / "manifest.json").read_text())
        assert m["config"]["mu"] == 7
        assert m["config"]["iterations"] == 2  # CLI wins

    def test_console_script_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "deformmvs.cli",
                               "--version"], capture_output=True, text=True)
        assert proc.returncode == 0


class TestEval:
    def test_eval_against_gt(self, tiny_scene_dir, recon_dir, tmp_path, capsys):
        out_csv = tmp_path / "eval.csv"
        rc = main(["eval", "--recon", str(recon_dir), "--gt",
                   str(tiny_scene_dir), "--tau", "0.05", "0.2",
                   "--out", str(out_csv)])
        assert rc == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "tau,accuracy,completeness,f1"
        assert len(lines) == 3

    def test_gt_cloud_evaluates_perfectly_against_itself(self, tiny_scene_dir,
                                                         tmp_path, capsys):
        # construct a reconstruction dir whose fused.ply is the GT cloud
        from deformmvs.cli import _gt_cloud
        from deformmvs.scene_io import write_ply_points
        gt = _gt_cloud(tiny_scene_dir)
        d = tmp_path / "perfect"
        d.mkdir()
        write_ply_points(d / "fused.ply", gt, np.tile([0, 0, -1.0], (len(gt), 1)),
                         np.zeros((len(gt), 3), np.uint8))
        assert main(["eval", "--recon", str(d), "--gt", str(tiny_scene_dir),
                     "--tau", "0.001"]) == 0
        rows = capsys.readouterr().out.splitlines()
        tau, acc, comp, f1 = rows[1].split(",")
        assert float(acc) == 1.0 and float(comp) == 1.0 and float(f1) == 1.0

    def test_half_coverage_completeness(self, tiny_scene_dir, tmp_path, capsys):
        from deformmvs.cli import _gt_cloud
        from deformmvs.scene_io import write_ply_points
        gt = _gt_cloud(tiny_scene_dir)
        half = gt[gt[:, 0] < np.median(gt[:, 0])]
        d = tmp_path / "half"
        d.mkdir()
        write_ply_points(d / "fused.ply", half,
                         np.tile([0, 0, -1.0], (len(half), 1)),
                         np.zeros((len(half), 3), np.uint8))
        assert main(["eval", "--recon", str(d), "--gt", str(tiny_scene_dir),
                     "--tau", "0.001"]) == 0
        rows = capsys.readouterr().out.splitlines()
        _, acc, comp, _ = rows[1].split(",")
        assert float(acc) == 1.0
        assert abs(float(comp) - 0.5) < 0.01

    def test_missing_gt_exit_2(self, recon_dir, tmp_path):
        assert main(["eval", "--recon", str(recon_dir), "--gt",
                     str(tmp_path)]) == 2


class TestMasksValidate:
    def test_scene_masks_ok(self, tiny_scene_dir, capsys):
        assert main(["masks-validate", "--scene", str(tiny_scene_dir)]) == 0
        assert "ok" in capsys.readouterr().out

    def test_single_manifest_ok(self, tiny_scene_dir):
        assert main(["masks-validate", "--manifest",
                     str(tiny_scene_dir / "masks_0000.manifest"),
                     "--size", "64x48"]) == 0

    def test_wrong_size_rejected(self, tiny_scene_dir):
        assert main(["masks-validate", "--manifest",
                     str(tiny_scene_dir / "masks_0000.manifest"),
                     "--size", "100x100"]) == 2

    def test_no_args_exit_2(self):
        assert main(["masks-validate"]) == 2
