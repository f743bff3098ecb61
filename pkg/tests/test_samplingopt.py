import itertools

import numpy as np
import pytest

from deformmvs import samplingopt as so
from deformmvs.deform import AnchorCluster, DeformedPatch
from deformmvs.errors import SequenceRangeError
from deformmvs.rng import RandomStream


def _patch(cluster_sizes, window=11):
    from deformmvs._kernels import round_to_odd
    clusters = []
    x = 0
    for k in cluster_sizes:
        anchors = [(40 + x + i, 40) for i in range(k)]
        x += k + 20
        clusters.append(AnchorCluster(anchors, min(int(round_to_odd(window / k)), window)))
    return DeformedPatch((20, 20), clusters)


class TestDisparitySequence:
    def test_hand_arithmetic(self):
        seq = so.build_disparity_sequence(10.0, 5, 0.5)
        assert np.array_equal(seq.values, [9.0, 9.5, 10.0, 10.5, 11.0])
        assert seq.values[2] == 10.0  # middle element is exactly d

    def test_mu_1_rejected(self):
        with pytest.raises(ValueError):
            so.build_disparity_sequence(10.0, 1, 0.5)
        with pytest.raises(ValueError):
            so.build_disparity_sequence(10.0, 4, 0.5)

    def test_strictly_increasing(self):
        seq = so.build_disparity_sequence(0.2, 7, 1e-3)
        assert (np.diff(seq.values) > 0).all()

    def test_range_violation_raises(self):
        with pytest.raises(SequenceRangeError):
            so.build_disparity_sequence(0.2, 5, 0.2, valid_range=(0.1, 0.5))

    def test_fit_sequence_shrinks_delta(self):
        seq = so.fit_sequence(0.2, 5, 0.2, (0.1, 0.5))
        assert seq.values[0] >= 0.1 - 1e-12 and seq.values[-1] <= 0.5 + 1e-12
        assert seq.center == 0.2

    def test_fit_sequence_nudges_edge_center(self):
        seq = so.fit_sequence(0.1, 5, 0.05, (0.1, 0.5))
        assert seq.values[0] >= 0.1 - 1e-12
        assert seq.delta == pytest.approx(0.05)


class TestGenerateSolutions:
    def test_k1_budget_nine_samples(self):
        patch = _patch([1])
        sols = so.generate_solutions(patch, 4, RandomStream(0))
        for s in sols:
            assert len(s.offsets) == 1
            assert len(s.offsets[0]) == 9
            assert (np.abs(s.offsets[0]) <= 5).all()  # 11x11 sub-patch

    def test_k3_budget_three_per_anchor(self):
        patch = _patch([3])
        sols = so.generate_solutions(patch, 2, RandomStream(0))
        for s in sols:
            assert len(s.offsets) == 3
            assert all(len(o) == 3 for o in s.offsets)

    def test_offsets_distinct_and_inside_window(self):
        patch = _patch([1, 2, 4, 8])
        for s in so.generate_solutions(patch, 8, RandomStream(3)):
            for half, offs in zip(s.halves, s.offsets):
                cells = {tuple(o) for o in offs}
                assert len(cells) == len(offs)
                assert (np.abs(offs) <= half).all()

    def test_budget_conservation(self):
        from deformmvs._kernels import samples_per_anchor
        for sizes in ([1], [2, 3], [8, 8], [1, 4, 5]):
            patch = _patch(sizes)
            want = sum(k * samples_per_anchor(k) for k in sizes)
            for s in so.generate_solutions(patch, 4, RandomStream(1)):
                assert s.total_samples == want
                for k in sizes:
                    assert abs(k * samples_per_anchor(k) - 9) <= k

    def test_fixed_seed_identical(self):
        patch = _patch([2, 3])
        a = so.generate_solutions(patch, 16, RandomStream(42))
        b = so.generate_solutions(patch, 16, RandomStream(42))
        for sa, sb in zip(a, b):
            assert all(np.array_equal(x, y) for x, y in zip(sa.offsets, sb.offsets))


class TestEvaluateProfile:
    def test_constant_cost(self):
        patch = _patch([1])
        sol = so.random_solution(patch, RandomStream(0))
        seq = so.build_disparity_sequence(0.5, 5, 0.01)
        prof = so.evaluate_profile(sol, seq, lambda depth, s: 0.3)
        assert np.allclose(prof.costs, 0.3)
        assert prof.mean == pytest.approx(0.3)

    def test_constructed_landscape_minimized_at_optimum(self):
        patch = _patch([1])
        sol = so.random_solution(patch, RandomStream(0))
        seq = so.build_disparity_sequence(0.5, 7, 0.02)
        d_star = seq.values[5]
        prof = so.evaluate_profile(
            sol, seq, lambda depth, s: abs(1.0 / depth - d_star))
        assert prof.argmin == 5

    def test_failure_scores_worst(self):
        patch = _patch([1])
        sol = so.random_solution(patch, RandomStream(0))
        seq = so.build_disparity_sequence(0.5, 5, 0.01)

        def flaky(depth, s):
            if abs(1.0 / depth - 0.5) < 1e-9:
                raise RuntimeError("boom")
            return 0.1

        prof = so.evaluate_profile(sol, seq, flaky)
        assert prof.costs[2] == 2.0
        assert np.allclose(np.delete(prof.costs, 2), 0.1)


class TestObjective:
    def test_flat_profile_heavily_penalized(self):
        prof = so.CostProfile(np.full(5, 0.5), 0)
        f = so.objective(prof, omega=1e-4, var_floor=1e-6)
        assert f == pytest.approx(2.5 + 1e-4 * 5 * 1e6, rel=1e-12)  # = 502.5

    def test_hand_arithmetic_profile(self):
        prof = so.CostProfile(np.array([0.0, 1.0, 2.0, 1.0, 0.0]), 0)
        inv_sum = 1 / 0.64 + 1 / 0.04 + 1 / 1.44 + 1 / 0.04 + 1 / 0.64
        omega = 1e-4
        assert so.objective(prof, omega, 1e-6) == pytest.approx(
            4.0 + omega * inv_sum, rel=1e-12)

    def test_translation_shifts_by_mu_delta(self):
        rng = np.random.default_rng(0)
        c = rng.uniform(0, 1, 7)
        shift = 0.37
        f0 = so.objective(so.CostProfile(c, 0), 1e-4, 1e-6)
        f1 = so.objective(so.CostProfile(c + shift, 0), 1e-4, 1e-6)
        assert f1 - f0 == pytest.approx(7 * shift, rel=1e-9)

    def test_sharp_beats_flat_for_any_positive_omega(self):
        sharp = so.CostProfile(np.array([0.9, 0.9, 0.0, 0.9, 0.9]), 0)
        flat = so.CostProfile(np.full(5, 3.6 / 5), 0)
        for omega in (1e-6, 1e-4, 1e-2):
            assert (so.objective(sharp, omega, 1e-6)
                    < so.objective(flat, omega, 1e-6))

    def test_term_switches(self):
        prof = so.CostProfile(np.array([0.1, 0.4, 0.2]), 0)
        full = so.objective(prof, 1e-4, 1e-6)
        cost_only = so.objective(prof, 1e-4, 1e-6, use_variance_term=False)
        var_only = so.objective(prof, 1e-4, 1e-6, use_cost_term=False)
        assert cost_only == pytest.approx(float(prof.costs.sum()), rel=1e-15)
        assert var_only == pytest.approx(full - cost_only, rel=1e-9)


class TestLocalSearch:
    def test_degenerate_returns_x0(self):
        patch = _patch([2])
        rng = RandomStream(5)
        x0 = so.random_solution(patch, RandomStream(5))
        best, _ = so.local_search(patch, so.build_disparity_sequence(0.5, 5, 0.01),
                                  lambda d, s: 0.5, j=1, rounds=1, omega=1e-4,
                                  rng=rng)
        assert all(np.array_equal(a, b) for a, b in zip(best.offsets, x0.offsets))

    def test_matches_exhaustive_argmin_tiny_instance(self):
        # one cluster of 5 anchors: sub-patch 3x3, 2 samples per anchor;
        # the cost depends only on anchor 0, so the search space is C(9,2)=36
        patch = _patch([5])
        table = np.array([[0.9, 0.8, 0.7],
                          [0.6, 0.5, 0.2],
                          [0.4, 0.3, 0.1]])

        def cost_fn(depth, sol):
            offs = sol.offsets[0]
            return float(sum(table[dy + 1, dx + 1] for dx, dy in offs) / len(offs))

        # exhaustive oracle over all 36 placements of anchor 0
        cells = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        best_pair = min(itertools.combinations(cells, 2),
                        key=lambda pair: table[pair[0][1] + 1, pair[0][0] + 1]
                        + table[pair[1][1] + 1, pair[1][0] + 1])
        seq = so.build_disparity_sequence(0.5, 5, 0.01)
        best, _ = so.local_search(patch, seq, cost_fn, j=200, rounds=2,
                                  omega=0.0, rng=RandomStream(7))
        got = {tuple(o) for o in best.offsets[0]}
        assert got == set(best_pair)

    def test_incumbent_objective_non_increasing_across_rounds(self):
        patch = _patch([3, 2])
        seq = so.build_disparity_sequence(0.5, 5, 0.01)
        rng0 = np.random.default_rng(9)
        noise = {}

        def cost_fn(depth, sol):
            key = tuple(tuple(map(tuple, o)) for o in sol.offsets)
            if key not in noise:
                noise[key] = rng0.uniform(0.1, 1.2)
            return noise[key] + 0.1 * abs(1.0 / depth - 0.5)

        prev = None
        for rounds in (1, 2, 3, 4, 5):
            best, prof = so.local_search(patch, seq, cost_fn, j=6, rounds=rounds,
                                         omega=1e-4, rng=RandomStream(11))
            f = so.objective(prof, 1e-4, 1e-6)
            if prev is not None:
                assert f <= prev + 1e-12
            prev = f

    def test_perturbation_preserves_budget_and_window(self):
        patch = _patch([4])
        sol = so.random_solution(patch, RandomStream(1))
        pert = so.perturb_solution(sol, RandomStream(2))
        assert pert.total_samples == sol.total_samples
        for half, offs in zip(pert.halves, pert.offsets):
            assert (np.abs(offs) <= half).all()
            assert len({tuple(o) for o in offs}) == len(offs)
