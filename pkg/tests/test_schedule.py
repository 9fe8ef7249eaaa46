import math

import numpy as np
import pytest

from cascadeflow.errors import ScheduleError
from cascadeflow.grids import ResampleFactors
from cascadeflow.schedule import StageSpec, build_schedule, gamma_min, jump_rollback


def solve_rollback_numerically(s: float, n: int) -> tuple[float, float]:
    """Independent oracle: solve the covariance-matching pair by bisection.

    diagonal:   (s/e)^2 (1-e)^2 + a^2       = (1-s)^2
    off-diag:   (s/e)^2 (1-e)^2 + a^2 * g   = 0,  g = -1/(n-1)

    Eliminating a^2 leaves f(e) = (s/e)^2(1-e)^2 (1 - g) + g (1-s)^2 = 0,
    monotone decreasing in e on (s, 1).
    """
    g = -1.0 / (n - 1)

    def f(e):
        return (s / e) ** 2 * (1 - e) ** 2 * (1 - g) + g * (1 - s) ** 2

    lo, hi = max(s, 1e-12), 1.0 - 1e-15
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    e = 0.5 * (lo + hi)
    a2 = (1 - s) ** 2 - (s / e) ** 2 * (1 - e) ** 2
    return e, math.sqrt(a2)


class TestBoundaries:
    def test_k3_uniform_partition(self, schedule):
        assert [schedule.start(k) for k in (2, 1, 0)] == pytest.approx([0.0, 1 / 3, 2 / 3])
        assert [schedule.nominal_end(k) for k in (2, 1, 0)] == pytest.approx([1 / 3, 2 / 3, 1.0])

    def test_k1_single_segment(self):
        sch = build_schedule([StageSpec("only")])
        assert sch.start(0) == 0.0
        assert sch.stage_end(0) == 1.0

    def test_boundaries_monotone_and_rollback_past_start(self, schedule):
        for k in range(schedule.n_stages - 1):
            assert schedule.start(k) < schedule.nominal_end(k)
            for temporal in (True, False):
                assert schedule.rollback_end(k, temporal) > schedule.start(k)

    def test_default_factors(self, schedule):
        assert schedule.jump_factors(0, True) == ResampleFactors(2, 2, 12)
        assert schedule.jump_factors(1, True) == ResampleFactors(2, 2, 10)
        assert schedule.block_size(0, True) == 48
        assert schedule.block_size(1, True) == 40
        assert schedule.block_size(0, False) == 4


class TestJumpRollback:
    def test_block_one_is_pure_rescaling(self):
        for s in (0.0, 0.3, 0.9):
            assert jump_rollback(s, 1) == (s, 0.0)

    def test_half_and_four(self):
        e, a = jump_rollback(0.5, 4)
        assert e == pytest.approx(2 / 3, abs=1e-15)
        assert a == pytest.approx(0.5 * math.sqrt(3 / 4), abs=1e-15)

    @pytest.mark.parametrize(
        "s,n",
        [(2 / 3, 48), (1 / 3, 40), (2 / 3, 4), (0.5, 4), (0.1, 2), (0.9, 100), (0.25, 7)],
    )
    def test_matches_numerical_oracle(self, s, n):
        e_ref, a_ref = solve_rollback_numerically(s, n)
        e, a = jump_rollback(s, n)
        assert e == pytest.approx(e_ref, abs=1e-10)
        assert a == pytest.approx(a_ref, abs=1e-10)

    def test_frozen_default_jump_values(self):
        # computed once with the numerical oracle above
        e48, a48 = jump_rollback(2 / 3, 48)
        assert e48 == pytest.approx(0.9326889714107277, abs=1e-12)
        assert a48 == pytest.approx(0.3298428357510533, abs=1e-12)
        e40, _ = jump_rollback(1 / 3, 40)
        assert e40 == pytest.approx(0.7597469266479577, abs=1e-12)

    def test_rejects_s_out_of_range(self):
        with pytest.raises(ScheduleError):
            jump_rollback(1.0, 4)
        with pytest.raises(ScheduleError):
            jump_rollback(-0.1, 4)

    def test_covariance_identities_exact(self, schedule):
        from cascadeflow.validate import check_rollback_identities

        report = check_rollback_identities(schedule)
        assert report["pass"]
        assert report["max_residual"] <= 1e-14


class TestGammaMin:
    @pytest.mark.parametrize("n,expected", [(2, -1.0), (4, -1 / 3), (48, -1 / 47)])
    def test_values(self, n, expected):
        assert gamma_min(n) == pytest.approx(expected, abs=1e-15)

    def test_rejects_small_blocks(self):
        with pytest.raises(ScheduleError):
            gamma_min(1)

    def test_minimizes_noise_weight(self):
        # any admissible correlation above the bound gives strictly more noise
        s, n = 0.4, 6
        g_min = gamma_min(n)
        alpha_min = (1 - s) / math.sqrt(1 - g_min)
        for g in np.linspace(g_min + 1e-6, -1e-6, 25):
            assert (1 - s) / math.sqrt(1 - g) > alpha_min


def test_spatial_special_case_matches_homogeneous_pyramid():
    # r_t = 1, r_h = r_w = 2: rescale numerator (1+s)/2 and noise (1-s)sqrt(3/4)
    from cascadeflow.transitions import JumpPlan

    for s in np.linspace(0.0, 0.95, 12):
        e, a = jump_rollback(s, 4)
        plan = JumpPlan(1, 0, ResampleFactors(2, 2, 1), s=s, rollback_end=e, alpha=a)
        assert plan.rescale == pytest.approx((1 + s) / 2, abs=1e-15)
        assert a == pytest.approx((1 - s) * math.sqrt(3 / 4), abs=1e-15)


class TestScheduleValidation:
    def test_rejects_zero_stages(self):
        with pytest.raises(ScheduleError):
            build_schedule([])

    def test_rejects_coarsest_with_factors(self):
        with pytest.raises(ScheduleError):
            build_schedule([StageSpec("a", ResampleFactors(2, 2, 2)), StageSpec("b", ResampleFactors(2, 2, 2))])

    def test_rejects_missing_factors(self):
        with pytest.raises(ScheduleError):
            build_schedule([StageSpec("a"), StageSpec("b")])

    def test_rejects_duplicate_labels(self):
        with pytest.raises(ScheduleError):
            build_schedule([StageSpec("a", ResampleFactors(2, 2, 2)), StageSpec("a")])


class TestLadders:
    def test_cumulative_spatial(self, schedule):
        assert schedule.cumulative_spatial(0) == (1, 1)
        assert schedule.cumulative_spatial(1) == (2, 2)
        assert schedule.cumulative_spatial(2) == (4, 4)

    def test_temporal_ladder(self, schedule):
        assert [schedule.ladder_temporal(tau) for tau in (0, 1, 2)] == [1, 12, 120]

    def test_window_frames_default_to_temporal_factor(self, schedule):
        assert schedule.window_frames(0) == 12
        assert schedule.window_frames(1) == 10
        assert schedule.window_frames(2) is None

    def test_timescale_index(self, schedule):
        assert schedule.timescale_index("monthly") == 0
        assert schedule.timescale_index("decadal") == 2
        with pytest.raises(ScheduleError):
            schedule.timescale_index("weekly")
