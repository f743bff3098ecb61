import math

import numpy as np
import pytest

from deformmvs import segprior as sp
from deformmvs.errors import PriorUnavailableError


def boundary_oracle(layer):
    """Any-4-neighbor-differs, scanned pixel by pixel."""
    h, w = layer.shape
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and layer[ny, nx] != layer[y, x]:
                    out[y, x] = True
    return out


class TestExtractBoundaries:
    def test_constant_raster_empty(self):
        assert sp.extract_boundaries(np.zeros((8, 8), np.int32)).count == 0

    def test_half_split_two_columns(self):
        layer = np.zeros((6, 8), np.int32)
        layer[:, 4:] = 1
        b = sp.extract_boundaries(layer).mask
        expect = np.zeros((6, 8), dtype=bool)
        expect[:, 3:5] = True
        assert np.array_equal(b, expect)

    def test_matches_neighbor_scan_oracle_fuzz(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            layer = rng.integers(0, 4, size=(16, 16)).astype(np.int32)
            got = sp.extract_boundaries(layer).mask
            assert np.array_equal(got, boundary_oracle(layer))


def segment_oracle(bnd, p, q, step=0.1):
    """Dense sampling of the segment with nearest-pixel rounding."""
    px, py = p
    qx, qy = q
    length = math.hypot(qx - px, qy - py)
    n = max(1, int(math.ceil(length / step)))
    for i in range(1, n + 1):
        t = i / n
        x = int(round(px + t * (qx - px)))
        y = int(round(py + t * (qy - py)))
        if (x, y) == (px, py):
            continue
        if bnd[y, x]:
            return True
    return False


class TestConfineAnchors:
    def test_empty_boundary_keeps_all(self):
        b = sp.BoundaryMap(np.zeros((20, 20), dtype=bool))
        anchors = [(3, 3), (15, 8), (9, 18)]
        assert sp.confine_anchors((10, 10), anchors, b) == anchors

    def test_enclosing_wall_discards_all(self):
        mask = np.zeros((21, 21), dtype=bool)
        mask[5, 5:16] = True
        mask[15, 5:16] = True
        mask[5:16, 5] = True
        mask[5:16, 15] = True
        b = sp.BoundaryMap(mask)
        anchors = [(0, 0), (20, 10), (10, 20), (0, 10)]
        assert sp.confine_anchors((10, 10), anchors, b) == []

    def test_diagonal_across_thin_wall_discarded(self):
        mask = np.zeros((12, 12), dtype=bool)
        mask[:, 6] = True  # one-pixel-wide vertical wall
        b = sp.BoundaryMap(mask)
        assert sp.confine_anchors((2, 2), [(10, 9)], b) == []
        assert segment_oracle(mask, (2, 2), (10, 9))

    def test_diagonal_wall_blocks_diagonal_segment(self):
        # corner-exact crossing: the conservative rule must block it
        mask = np.zeros((6, 6), dtype=bool)
        mask[0, 3] = mask[1, 2] = mask[2, 1] = mask[3, 0] = True
        b = sp.BoundaryMap(mask)
        assert sp.confine_anchors((0, 0), [(3, 3)], b) == []

    def test_matches_supersampled_oracle_random(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            mask = rng.random((16, 16)) < 0.15
            p = tuple(rng.integers(0, 16, 2))
            q = tuple(rng.integers(0, 16, 2))
            if p == q:
                continue
            # skip segments through exact lattice corners, where the
            # conservative rule and the sampler legitimately differ: a corner
            # is hit iff |dx| and |dy| share their power-of-two factor
            dx, dy = abs(p[0] - q[0]), abs(p[1] - q[1])
            if dx > 0 and dy > 0:
                v2 = lambda n: (n & -n).bit_length() - 1
                if v2(int(dx)) == v2(int(dy)):
                    continue
            got = not sp.segment_clear(sp.BoundaryMap(mask), p, q)
            want = segment_oracle(mask, p, q)
            assert got == want, (p, q)

    def test_monotone_under_boundary_growth(self):
        rng = np.random.default_rng(2)
        base = rng.random((16, 16)) < 0.1
        grown = base | (rng.random((16, 16)) < 0.1)
        anchors = [tuple(rng.integers(0, 16, 2)) for _ in range(30)]
        kept_base = set(sp.confine_anchors((8, 8), anchors, sp.BoundaryMap(base)))
        kept_grown = set(sp.confine_anchors((8, 8), anchors, sp.BoundaryMap(grown)))
        assert kept_grown <= kept_base


def _coplanar(n, rng, noise=0.0):
    pts = np.zeros((n, 3))
    pts[:, 0] = rng.uniform(-5, 5, n)
    pts[:, 1] = rng.uniform(-5, 5, n)
    pts[:, 2] = 2.0 + 0.1 * pts[:, 0] - 0.2 * pts[:, 1]
    if noise:
        pts[:, 2] += rng.normal(0, noise, n)
    return pts


class TestSelectOptimalSubset:
    def test_single_nonempty_subset(self):
        rng = np.random.default_rng(3)
        pts = _coplanar(6, rng)
        assert sp.select_optimal_subset([[], [0, 1, 2, 3, 4, 5]], pts, 0.01) == 1

    def test_ratio_breaks_count_tie(self):
        # S1: 6 anchors / 6 inliers; S2: 8 anchors / 6 inliers -> S1 wins
        rng = np.random.default_rng(4)
        pts = np.zeros((10, 3))
        pts[:6] = _coplanar(6, rng)
        pts[6] = [0.0, 0.0, 50.0]
        pts[7] = [1.0, 0.0, -40.0]
        pts[8] = [10.0, 0.0, 77.0]
        pts[9] = [0.0, 10.0, -66.0]
        s1 = [0, 1, 2, 3, 4, 5]
        s2 = [0, 1, 2, 3, 4, 5, 6, 7]
        assert sp.select_optimal_subset([s2, s1], pts, 0.05) == 1
        assert sp.select_optimal_subset([s1, s2], pts, 0.05) == 0

    def test_count_dominates_ratio(self):
        # S1: 4/4; S2: 8 anchors with 7 coplanar -> S2 wins on count
        rng = np.random.default_rng(5)
        pts = np.zeros((12, 3))
        pts[:4] = _coplanar(4, rng)
        pts[4:11] = _coplanar(7, np.random.default_rng(6))
        pts[11] = [0.0, 0.0, 99.0]
        s1 = [0, 1, 2, 3]
        s2 = [4, 5, 6, 7, 8, 9, 10, 11]
        assert sp.select_optimal_subset([s1, s2], pts, 0.05) == 1

    def test_all_empty_raises(self):
        with pytest.raises(PriorUnavailableError):
            sp.select_optimal_subset([[], []], np.zeros((0, 3)), 0.01)


class TestRetainMasks:
    def test_single_layer_everything_retained(self):
        layer = np.array([[0, 0, 1], [0, 1, 1]], np.int32)
        votes = np.full((2, 3), -1)
        votes[0, 0] = 0
        retained = sp.retain_masks([layer], votes)
        assert retained[0].all()

    def test_majority_vote_per_region(self):
        # one region; 10 pixels vote layer 0 and 3 vote layer 1
        layer0 = np.zeros((1, 13), np.int32)
        layer1 = np.zeros((1, 13), np.int32)
        votes = np.concatenate([np.zeros(10, int), np.ones(3, int)])[None, :]
        retained = sp.retain_masks([layer0, layer1], votes)
        assert retained[0].all()
        assert not retained[1].any()

    def test_fine_region_wins_where_it_votes(self):
        # coarse merges two halves; fine splits them; right half votes fine
        coarse = np.zeros((4, 8), np.int32)
        fine = np.zeros((4, 8), np.int32)
        fine[:, 4:] = 1
        votes = np.full((4, 8), -1)
        votes[:, :4] = 0
        votes[:, 4:] = 1
        retained = sp.retain_masks([coarse, fine], votes)
        # the coarse whole-image region collects 16 votes each; tie -> coarse
        assert retained[0].all()
        votes[:, 4:] = 1
        votes[1:, :4] = -1  # fewer coarse votes now
        retained = sp.retain_masks([coarse, fine], votes)
        assert not retained[0].any()
        assert retained[1][:, 4:].all()
        assert not retained[1][:, :4].any()

    def test_zero_vote_region_kept_at_coarsest(self):
        coarse = np.zeros((2, 2), np.int32)
        fine = np.arange(4, dtype=np.int32).reshape(2, 2)
        votes = np.full((2, 2), -1)
        retained = sp.retain_masks([coarse, fine], votes)
        assert retained[0].all()
        assert not retained[1].any()

    def test_partition_property_after_overlay(self):
        rng = np.random.default_rng(7)
        layers = [rng.integers(0, k, size=(12, 12)) for k in (2, 3, 6)]
        layers = [np.unique(l, return_inverse=True)[1].reshape(12, 12).astype(np.int32)
                  for l in layers]
        votes = rng.integers(-1, 3, size=(12, 12))
        retained = sp.retain_masks(layers, votes)
        composite = sp.overlay_retained(layers, retained)
        assert composite.min() >= 0  # every pixel assigned exactly one label
        k = composite.max() + 1
        assert len(np.unique(composite)) == k


class TestAggregateBoundary:
    def test_single_layer_boundary_unchanged(self):
        layer = np.zeros((6, 6), np.int32)
        layer[:, 3:] = 1
        composite, b = sp.aggregate_boundary([layer], [np.ones((6, 6), bool)])
        assert np.array_equal(b.mask, sp.extract_boundaries(layer).mask)

    def test_disjoint_regions_union_of_boundaries(self):
        coarse = np.zeros((8, 8), np.int32)
        coarse[:4] = 1
        fine = np.zeros((8, 8), np.int32)
        fine[:, :4] = 1
        keep_coarse = np.zeros((8, 8), bool)
        keep_coarse[:4] = True  # region 1 of coarse
        keep_fine = np.zeros((8, 8), bool)
        keep_fine[4:, :] = True  # bottom rows come from fine
        composite, b = sp.aggregate_boundary([coarse, fine], [keep_coarse, keep_fine])
        oracle = boundary_oracle(composite)
        assert np.array_equal(b.mask, oracle)

    def test_overlap_composite_matches_pixelwise_overlay_oracle(self):
        rng = np.random.default_rng(8)
        layers = [rng.integers(0, k, size=(10, 10)) for k in (2, 4)]
        layers = [np.unique(l, return_inverse=True)[1].reshape(10, 10).astype(np.int32)
                  for l in layers]
        retained = [np.ones((10, 10), bool), rng.random((10, 10)) < 0.5]
        composite, b = sp.aggregate_boundary(layers, retained)
        # oracle: per-pixel overlay, fine overwrites coarse
        src = np.where(retained[1], 1, 0)
        oracle_pairs = np.where(src == 1, layers[1] + 1000, layers[0])
        # boundaries of the overlay equal boundaries of the composite
        assert np.array_equal(b.mask, sp.extract_boundaries(oracle_pairs).mask
                              | sp.extract_boundaries(composite).mask)


class TestCrf:
    def test_potts_identity_zero(self):
        # equal labels contribute no pairwise energy regardless of kernel
        k = sp.pairwise_kernel(np.array(1.0), np.array(1.0), np.array(1.0),
                               t=3, alpha=1.0, beta=1.0)
        assert k == pytest.approx(1.0)  # mu(l,l)=0 zeroes it in the energy

    def test_zero_difference_kernel_is_one(self):
        k = sp.pairwise_kernel(np.array(2.5), np.array(2.5), np.array(1.0),
                               t=4, alpha=0.7, beta=0.3)
        assert k == pytest.approx(1.0)

    def test_hand_arithmetic_kernel(self):
        # t=2, |Dp-Dq|=0.5, alpha=1, |Ip.Iq-1|=0.3, beta=1
        k = sp.pairwise_kernel(np.array(1.0), np.array(1.5), np.array(0.7),
                               t=2, alpha=1.0, beta=1.0)
        assert k == pytest.approx(math.exp(-(2 * 0.5 + 0.5 * 0.3)), rel=1e-12)

    def test_invalid_depth_drops_depth_term(self):
        k = sp.pairwise_kernel(np.array(0.0), np.array(5.0), np.array(0.7),
                               t=2, alpha=1.0, beta=1.0)
        assert k == pytest.approx(math.exp(-0.5 * 0.3), rel=1e-12)

    def test_depth_term_dominates_as_t_grows(self):
        # monotone decreasing in t whenever depth diff/alpha > color diff/beta
        dd, cc = 0.8, 0.2
        vals = [sp.pairwise_kernel(np.array(0.0 + dd), np.array(0.0), np.array(1 - cc),
                                   t=t, alpha=1.0, beta=1.0) for t in (1, 2, 3, 5, 9)]
        # depth invalid? no: both positive here
        vals = [sp.pairwise_kernel(np.array(1.0 + dd), np.array(1.0), np.array(1 - cc),
                                   t=t, alpha=1.0, beta=1.0) for t in (1, 2, 3, 5, 9)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_energy_non_increasing_on_random_fixtures(self):
        rng = np.random.default_rng(9)
        for fixture in range(10):
            h, w = 16, 16
            labels = rng.integers(0, 3, size=(h, w)).astype(np.int32)
            depth = rng.uniform(2.0, 4.0, size=(h, w))
            depth[:, 8:] += 2.0
            image = rng.uniform(0, 1, size=(h, w, 3)).astype(np.float32)
            res = sp.crf_refine(labels, depth, image, t=1 + fixture % 3,
                                alpha=0.3, beta=0.2, iters=5)
            for a, b in zip(res.energies, res.energies[1:]):
                assert b <= a + 1e-9
            # label raster remains a valid partition drawn from input labels
            assert set(np.unique(res.labels)) <= set(np.unique(labels))

    def test_crf_straightens_ragged_edge_onto_depth_edge(self):
        # a ragged label edge around a straight depth step gets cleaned up:
        # zigzag pixels with majority cross-label neighbors flip
        rng = np.random.default_rng(10)
        h, w = 16, 16
        depth = np.full((h, w), 3.0)
        depth[:, 8:] = 6.0  # depth edge between columns 7 and 8
        labels = np.zeros((h, w), np.int32)
        labels[:, 8:] = 1
        jag = rng.random(h) < 0.5
        labels[jag, 8] = 0  # jagged intrusions past the depth edge
        image = np.full((h, w, 3), 0.5, np.float32)
        res = sp.crf_refine(labels, depth, image, t=4, alpha=0.15, beta=0.2, iters=8)
        before = (labels[:, 8] == 0).sum()
        after = (res.labels[:, 8] == 0).sum()
        assert after < before

    def test_single_label_raster_is_noop(self):
        labels = np.zeros((5, 5), np.int32)
        res = sp.crf_refine(labels, np.ones((5, 5)), np.ones((5, 5, 3), np.float32),
                            t=1, alpha=1.0, beta=1.0)
        assert np.array_equal(res.labels, labels)
