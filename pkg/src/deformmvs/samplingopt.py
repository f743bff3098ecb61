"""Disparity-sampling synergistic optimization.

Solutions place round(9/k) sample offsets inside each anchor's sub-patch;
each solution is scored by its cost profile over a disparity (inverse-depth)
sequence, where the objective prefers low cost and high profile variance
(low matching ambiguity). An iterative local search over solutions keeps the
incumbent that minimizes the objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import samples_per_anchor
from .deform import DeformedPatch
from .errors import SequenceRangeError
from .rng import RandomStream

DEFAULT_OMEGA = 1e-4
DEFAULT_VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class DisparitySequence:
    """mu odd inverse-depth values centered on d with spacing delta."""

    center: float
    mu: int
    delta: float
    values: np.ndarray = field(default=None)  # filled in __post_init__

    def __post_init__(self):
        idx = np.arange(1, self.mu + 1, dtype=np.float64)
        vals = self.center + (idx - (self.mu + 1) / 2.0) * self.delta
        object.__setattr__(self, "values", vals)


def build_disparity_sequence(d: float, mu: int, delta: float,
                             valid_range: tuple[float, float] | None = None
                             ) -> DisparitySequence:
    """Sequence d_i = d + (i - (mu+1)/2) * delta for i = 1..mu.

    mu must be odd and >= 3, delta positive; when valid_range is given every
    value must stay inside it (SequenceRangeError otherwise; the caller
    shrinks delta).
    """
    if mu < 3 or mu % 2 == 0:
        raise ValueError("mu must be odd and >= 3")
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    seq = DisparitySequence(float(d), int(mu), float(delta))
    if valid_range is not None:
        lo, hi = valid_range
        if seq.values[0] < lo - 1e-12 or seq.values[-1] > hi + 1e-12:
            raise SequenceRangeError(
                f"sequence [{seq.values[0]:g}, {seq.values[-1]:g}] leaves "
                f"[{lo:g}, {hi:g}]")
    return seq


def fit_sequence(d: float, mu: int, delta: float,
                 valid_range: tuple[float, float]) -> DisparitySequence:
    """build_disparity_sequence with delta shrunk (and d nudged inward when it
    sits on the range edge) so the sequence always fits."""
    lo, hi = valid_range
    half = (mu - 1) / 2.0
    d = min(max(d, lo), hi)
    room = min(d - lo, hi - d) / half
    eff = min(delta, room)
    if eff < delta * 1e-3:
        # center is pinned at an edge: slide it inward instead
        d = lo + half * delta if d - lo < hi - d else hi - half * delta
        d = min(max(d, lo), hi)
        eff = min(delta, min(d - lo, hi - d) / half)
    return build_disparity_sequence(d, mu, max(eff, 1e-300), valid_range)


@dataclass
class SamplingSolution:
    """Per-anchor sample offsets (dx, dy), each within its sub-patch window."""

    offsets: list[np.ndarray]  # one (n_s, 2) int array per anchor
    halves: list[int]          # half window size per anchor
    solution_id: int = 0

    def copy(self, solution_id: int | None = None) -> "SamplingSolution":
        return SamplingSolution([o.copy() for o in self.offsets], list(self.halves),
                                self.solution_id if solution_id is None else solution_id)

    @property
    def total_samples(self) -> int:
        return sum(len(o) for o in self.offsets)


@dataclass
class CostProfile:
    """Matching costs of one solution across a disparity sequence."""

    costs: np.ndarray
    solution_id: int

    @property
    def mean(self) -> float:
        return float(self.costs.mean())

    @property
    def argmin(self) -> int:
        return int(np.argmin(self.costs))


def _anchor_budget(patch: DeformedPatch) -> list[tuple[int, int]]:
    """(half_window, samples) per anchor, cluster order preserved."""
    out = []
    for cluster in patch.clusters:
        n_s = samples_per_anchor(cluster.size)
        half = cluster.sub_patch_size // 2
        out.extend([(half, n_s)] * cluster.size)
    return out


def _random_offsets(half: int, n_s: int, rng: RandomStream) -> np.ndarray:
    """n_s distinct cells drawn uniformly from the (2*half+1)^2 window."""
    side = 2 * half + 1
    cells = side * side
    n_s = min(n_s, cells)
    chosen: list[int] = []
    taken = set()
    while len(chosen) < n_s:
        c = rng.randint(cells)
        if c not in taken:
            taken.add(c)
            chosen.append(c)
    out = np.empty((n_s, 2), dtype=np.int64)
    for i, c in enumerate(chosen):
        out[i, 0] = c % side - half
        out[i, 1] = c // side - half
    return out


def random_solution(patch: DeformedPatch, rng: RandomStream,
                    solution_id: int = 0) -> SamplingSolution:
    budget = _anchor_budget(patch)
    return SamplingSolution([_random_offsets(half, n_s, rng)
                             for half, n_s in budget],
                            [half for half, _ in budget], solution_id)


def generate_solutions(patch: DeformedPatch, j: int,
                       rng: RandomStream) -> list[SamplingSolution]:
    """x0 plus J-1 independently shuffled placements (deterministic in rng)."""
    if patch.empty:
        raise ValueError("cannot sample an empty patch")
    return [random_solution(patch, rng, solution_id=i) for i in range(j)]


def perturb_solution(solution: SamplingSolution, rng: RandomStream,
                     solution_id: int = 0) -> SamplingSolution:
    """Relocate ceil(n/3) samples per anchor uniformly within the sub-patch."""
    out = solution.copy(solution_id)
    for half, offs in zip(out.halves, out.offsets):
        n_s = len(offs)
        if n_s == 0:
            continue
        side = 2 * half + 1
        n_move = -(-n_s // 3)
        taken = {(int(o[0]), int(o[1])) for o in offs}
        for _ in range(n_move):
            i = rng.randint(n_s)
            old = (int(offs[i, 0]), int(offs[i, 1]))
            for _ in range(64):
                c = rng.randint(side * side)
                cell = (c % side - half, c // side - half)
                if cell not in taken:
                    taken.discard(old)
                    taken.add(cell)
                    offs[i, 0], offs[i, 1] = cell
                    break
    return out


def evaluate_profile(solution: SamplingSolution, seq: DisparitySequence,
                     cost_fn) -> CostProfile:
    """Evaluate cost_fn(depth=1/d_i, solution) per disparity; failures score 2.

    The normal is held fixed by the caller while the sequence perturbs depth
    only, matching the one-dimensional profile picture.
    """
    costs = np.empty(seq.mu, dtype=np.float64)
    for i, disp in enumerate(seq.values):
        try:
            depth = 1.0 / disp if disp > 0.0 else float("inf")
            c = cost_fn(depth, solution)
            costs[i] = min(max(float(c), 0.0), 2.0)
        except Exception:
            costs[i] = 2.0
    return CostProfile(costs, solution.solution_id)


def objective(profile: CostProfile, omega: float = DEFAULT_OMEGA,
              var_floor: float = DEFAULT_VAR_FLOOR,
              use_cost_term: bool = True, use_variance_term: bool = True) -> float:
    """F = sum(c_i) + omega * sum(1 / max((c_i - mean)^2, var_floor)).

    The floor removes the division-by-zero at perfectly flat profiles (which
    the variance term is meant to penalize: flat = ambiguous). The two term
    switches back the objective ablations.
    """
    c = profile.costs
    f = 0.0
    if use_cost_term:
        f += float(c.sum())
    if use_variance_term:
        dev2 = np.maximum((c - c.mean()) ** 2, var_floor)
        f += omega * float((1.0 / dev2).sum())
    return f


def local_search(patch: DeformedPatch, seq: DisparitySequence, cost_fn,
                 j: int, rounds: int, omega: float, rng: RandomStream,
                 var_floor: float = DEFAULT_VAR_FLOOR,
                 incumbent: SamplingSolution | None = None
                 ) -> tuple[SamplingSolution, CostProfile]:
    """Iterative local search: round 1 samples J random solutions (x0 first),
    later rounds perturb the incumbent; elitist acceptance keeps F
    non-increasing across rounds."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    best = incumbent if incumbent is not None else random_solution(patch, rng, 0)
    best_profile = evaluate_profile(best, seq, cost_fn)
    best_f = objective(best_profile, omega, var_floor)
    sid = 1
    for rnd in range(rounds):
        for _ in range(j - 1):
            if rnd == 0:
                cand = random_solution(patch, rng, sid)
            else:
                cand = perturb_solution(best, rng, sid)
            sid += 1
            prof = evaluate_profile(cand, seq, cost_fn)
            f = objective(prof, omega, var_floor)
            if f < best_f:
                best, best_profile, best_f = cand, prof, f
    return best, best_profile
