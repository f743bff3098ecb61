import struct

import numpy as np
import pytest

from deformmvs import scene_io as sio
from deformmvs.errors import SceneFormatError


def _camera(offset=0.0):
    return sio.CameraParams(100.0, 110.0, 32.0, 24.0, np.eye(3),
                            np.array([offset, 0.0, 0.0]))


def _rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _random_bundle(rng, with_masks=True):
    h, w = 24, 32
    cams, images, masks = [], [], []
    for v in range(3):
        cams.append(sio.CameraParams(90.0 + v, 95.0, 16.0, 12.0,
                                     _rot_z(0.01 * v), np.array([0.1 * v, 0.0, 0.0])))
        data = rng.integers(0, 256, size=(h, w, 3) if v == 0 else (h, w)).astype(np.uint8)
        img = sio.ImageBuffer(w, h, 3 if v == 0 else 1,
                              data.astype(np.float32) / np.float32(255))
        images.append(img)
        if with_masks:
            layers = [rng.integers(0, k, size=(h, w)) for k in (2, 3, 5)]
            layers = [np.unique(l, return_inverse=True)[1].reshape(h, w).astype(np.int32)
                      for l in layers]
            masks.append(sio.MaskPyramid(layers))
        else:
            masks.append(None)
    return sio.SceneBundle(cams, images, masks, depth_range=(2.0, 9.0))


class TestPfm:
    def test_round_trip_random(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((17, 23)).astype(np.float32)
        dn = sio.DepthNormalMap(23, 17, data, np.zeros((17, 23, 3), np.float32))
        path = tmp_path / "d.pfm"
        sio.write_depth_pfm(dn, path)
        back = sio.read_depth_pfm(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, data)

    def test_all_invalid_map_is_zeros(self, tmp_path):
        dn = sio.DepthNormalMap(5, 4, np.zeros((4, 5), np.float32),
                                np.zeros((4, 5, 3), np.float32))
        path = tmp_path / "z.pfm"
        sio.write_depth_pfm(dn, path)
        assert np.array_equal(sio.read_depth_pfm(path), np.zeros((4, 5)))

    def test_hand_encoded_2x2_payload(self, tmp_path):
        # bottom-up scanlines: row {3,4} first, then {1,2}
        dn = sio.DepthNormalMap(2, 2, np.array([[1.0, 2.0], [3.0, 4.0]], np.float32),
                                np.zeros((2, 2, 3), np.float32))
        path = tmp_path / "h.pfm"
        sio.write_depth_pfm(dn, path)
        raw = path.read_bytes()
        header_end = raw.index(b"-1.0\n") + 5
        payload = raw[header_end:]
        assert len(payload) == 4 * 2 * 2
        assert payload == struct.pack("<4f", 3.0, 4.0, 1.0, 2.0)

    def test_payload_size_exact(self, tmp_path):
        for w, h in [(3, 7), (16, 5)]:
            dn = sio.DepthNormalMap(w, h, np.ones((h, w), np.float32),
                                    np.zeros((h, w, 3), np.float32))
            path = tmp_path / f"s{w}x{h}.pfm"
            sio.write_depth_pfm(dn, path)
            raw = path.read_bytes()
            header_end = raw.index(b"-1.0\n") + 5
            assert len(raw) - header_end == 4 * w * h

    def test_normal_pfm_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        n = rng.standard_normal((6, 9, 3)).astype(np.float32)
        dn = sio.DepthNormalMap(9, 6, np.ones((6, 9), np.float32), n)
        sio.write_normal_pfm(dn, tmp_path / "n.pfm")
        assert np.array_equal(sio.read_normal_pfm(tmp_path / "n.pfm"), n)


class TestNetpbm:
    def test_p5_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        arr = rng.integers(0, 256, size=(11, 13)).astype(np.uint8)
        sio.write_pnm(tmp_path / "a.pgm", arr)
        back, maxval = sio.read_pnm(tmp_path / "a.pgm")
        assert maxval == 255 and np.array_equal(back, arr)

    def test_p6_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        arr = rng.integers(0, 256, size=(7, 9, 3)).astype(np.uint8)
        sio.write_pnm(tmp_path / "a.ppm", arr)
        back, _ = sio.read_pnm(tmp_path / "a.ppm")
        assert np.array_equal(back, arr)

    def test_16bit_big_endian_round_trip(self, tmp_path):
        arr = np.array([[0, 1], [300, 65535]], dtype=np.uint16)
        sio.write_pnm(tmp_path / "m.pgm", arr, maxval=65535)
        raw = (tmp_path / "m.pgm").read_bytes()
        assert raw.endswith(struct.pack(">4H", 0, 1, 300, 65535))
        back, maxval = sio.read_pnm(tmp_path / "m.pgm")
        assert maxval == 65535 and np.array_equal(back, arr)

    def test_image_unit_range(self, tmp_path):
        arr = np.array([[0, 128, 255]], dtype=np.uint8)
        sio.write_pnm(tmp_path / "g.pgm", arr)
        img = sio.load_image(tmp_path / "g.pgm")
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0
        sio.save_image(tmp_path / "g2.pgm", img)
        back, _ = sio.read_pnm(tmp_path / "g2.pgm")
        assert np.array_equal(back, arr)


class TestSceneRoundTrip:
    def test_bundle_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        bundle = _random_bundle(rng)
        sio.save_scene(tmp_path, bundle)
        back = sio.load_scene(tmp_path)
        assert back.n_views == 3
        for a, b in zip(bundle.cameras, back.cameras):
            assert a.fx == b.fx and a.fy == b.fy and a.cx == b.cx and a.cy == b.cy
            assert np.array_equal(a.rotation, b.rotation)
            assert np.array_equal(a.center, b.center)
        for a, b in zip(bundle.images, back.images):
            assert np.array_equal(a.data, b.data)
        for a, b in zip(bundle.masks, back.masks):
            assert a.layer_count == b.layer_count
            for la, lb in zip(a.layers, b.layers):
                assert np.array_equal(la, lb)
        assert back.depth_range == bundle.depth_range

    def test_missing_cameras_txt(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="cameras.txt"):
            sio.load_scene(tmp_path)

    def test_mask_dimension_mismatch(self, tmp_path):
        rng = np.random.default_rng(5)
        bundle = _random_bundle(rng, with_masks=False)
        sio.save_scene(tmp_path, bundle)
        bad = sio.MaskPyramid([np.zeros((48, 64), np.int32)])
        sio.save_mask_pyramid(tmp_path, 0, bad)
        with pytest.raises(SceneFormatError, match="64x48"):
            sio.load_scene(tmp_path)

    def test_noncontiguous_labels_rejected(self, tmp_path):
        pyr = sio.MaskPyramid([np.array([[0, 2], [0, 2]], np.int32)])
        with pytest.raises(SceneFormatError, match="contiguous"):
            sio.validate_mask_pyramid(pyr, (2, 2))

    def test_bad_rotation_rejected(self):
        with pytest.raises(SceneFormatError, match="orthonormal"):
            sio.CameraParams(1.0, 1.0, 0.0, 0.0, np.eye(3) * 2.0, np.zeros(3))


class TestPointCloud:
    def test_pinhole_identity_case(self, tmp_path):
        # one valid pixel at depth 2, identity camera at origin, fx=fy=1,
        # cx=cy=0, pixel (0,0) -> vertex (0,0,2)
        depth = np.zeros((2, 2), np.float32)
        depth[0, 0] = 2.0
        normals = np.zeros((2, 2, 3), np.float32)
        normals[..., 2] = -1.0
        dn = sio.DepthNormalMap(2, 2, depth, normals)
        cam = sio.CameraParams(1.0, 1.0, 0.0, 0.0, np.eye(3), np.zeros(3))
        img = sio.ImageBuffer(2, 2, 1, np.full((2, 2), 0.5, np.float32))
        count = sio.export_point_cloud([dn], [cam], [img], tmp_path / "c.ply")
        assert count == 1
        xyz, n, col = sio.read_ply_points(tmp_path / "c.ply")
        assert np.allclose(xyz[0], [0.0, 0.0, 2.0])
        assert np.allclose(n[0], [0.0, 0.0, -1.0])
        assert tuple(col[0]) == (128, 128, 128)

    def test_all_invalid_raises(self, tmp_path):
        dn = sio.DepthNormalMap(3, 3, np.zeros((3, 3), np.float32),
                                np.zeros((3, 3, 3), np.float32))
        cam = _camera()
        img = sio.ImageBuffer(3, 3, 1, np.zeros((3, 3), np.float32))
        with pytest.raises(ValueError, match="no valid points"):
            sio.export_point_cloud([dn], [cam], [img], tmp_path / "x.ply")
        assert not (tmp_path / "x.ply").exists() or (tmp_path / "x.ply").stat().st_size == 0

    def test_fully_valid_count(self, tmp_path):
        dn = sio.DepthNormalMap(10, 10, np.full((10, 10), 3.0, np.float32),
                                np.tile(np.array([0, 0, -1], np.float32), (10, 10, 1)))
        cam = _camera()
        img = sio.ImageBuffer(10, 10, 1, np.full((10, 10), 0.25, np.float32))
        assert sio.export_point_cloud([dn], [cam], [img], tmp_path / "f.ply") == 100

    def test_backprojection_reprojects_to_source_pixel(self, tmp_path):
        rng = np.random.default_rng(6)
        h, w = 12, 16
        depth = rng.uniform(2.0, 8.0, size=(h, w)).astype(np.float32)
        normals = np.tile(np.array([0, 0, -1], np.float32), (h, w, 1))
        dn = sio.DepthNormalMap(w, h, depth, normals)
        cam = sio.CameraParams(80.0, 85.0, 8.0, 6.0, _rot_z(0.2),
                               np.array([0.3, -0.1, 0.05]))
        xyz, _, iy, ix = sio.back_project(dn, cam)
        pc = (xyz - cam.center) @ cam.rotation.T
        u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
        v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
        assert np.abs(u - ix).max() < 1e-4
        assert np.abs(v - iy).max() < 1e-4
