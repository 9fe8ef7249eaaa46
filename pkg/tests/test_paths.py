import numpy as np
import pytest

from cascadeflow.errors import PathError
from cascadeflow.paths import (
    DeltaPath,
    build_conditioning,
    interpolate,
    make_training_sample,
    sample_delta_path,
    sample_endpoints,
)
from cascadeflow.rng import stream


class TestDeltaPath:
    def test_rejects_non_monotone(self):
        with pytest.raises(PathError):
            DeltaPath((1, 0))

    def test_rejects_non_binary(self):
        with pytest.raises(PathError):
            DeltaPath((0, 2))

    def test_timescales_full_path(self):
        path = DeltaPath.full(3)
        assert [path.timescale_of_stage(k) for k in (0, 1, 2)] == [0, 1, 2]

    def test_timescales_intermediate(self):
        path = DeltaPath((0, 1))
        assert [path.timescale_of_stage(k) for k in (0, 1, 2)] == [1, 1, 2]

    def test_timescales_spatial_only(self):
        path = DeltaPath.spatial_only(3)
        assert [path.timescale_of_stage(k) for k in (0, 1, 2)] == [2, 2, 2]

    def test_for_timescale(self):
        assert DeltaPath.for_timescale(3, 0).flags == (1, 1)
        assert DeltaPath.for_timescale(3, 1).flags == (0, 1)
        assert DeltaPath.for_timescale(3, 2).flags == (0, 0)

    def test_single_stage(self):
        path = DeltaPath(())
        assert path.n_stages == 1
        assert path.timescale_of_stage(0) == 0


class TestSampleDeltaPath:
    def test_only_valid_paths_and_roughly_uniform(self):
        rng = stream(0, "delta")
        counts = {}
        n = 30_000
        for _ in range(n):
            p = sample_delta_path(rng, 3)
            counts[p.flags] = counts.get(p.flags, 0) + 1
        assert set(counts) == {(0, 0), (0, 1), (1, 1)}
        for v in counts.values():
            assert abs(v / n - 1 / 3) < 0.02

    def test_general_k_uniform(self):
        rng = stream(1, "delta")
        counts = {}
        n = 20_000
        for _ in range(n):
            counts[sample_delta_path(rng, 4).flags] = counts.get(sample_delta_path(rng, 4).flags, 0) + 1
        assert len(counts) == 4

    def test_k1_trivial(self):
        assert sample_delta_path(stream(0, "x"), 1).flags == ()


class TestSampleEndpoints:
    def test_shared_noise_identity(self, schedule, rng):
        # both endpoints are built from one draw: removing the data terms
        # must leave the identical noise field
        x1 = rng.standard_normal((2, 120, 8, 8))
        path = DeltaPath.full(3)
        k = 1
        x_start, x_end = sample_endpoints(x1, schedule, k, path, stream(0, "n"))
        s, e = schedule.start(k), schedule.stage_end(k, True)
        from cascadeflow.grids import _block_mean, _replicate
        from cascadeflow.paths import _stage_factors

        down_k, _ = _stage_factors(schedule, k, path)
        mean_end = _block_mean(x1, down_k)
        down_p, _ = _stage_factors(schedule, k + 1, path)
        mean_start = _replicate(_block_mean(x1, down_p), schedule.jump_factors(k, True))
        n_from_end = (x_end - e * mean_end) / (1 - e)
        n_from_start = (x_start - s * mean_start) / (1 - s)
        assert np.allclose(n_from_end, n_from_start, atol=1e-12)

    def test_coarsest_start_is_pure_noise(self, schedule, rng):
        x1 = rng.standard_normal((2, 120, 8, 8))
        x_start, x_end = sample_endpoints(x1, schedule, 2, DeltaPath.full(3), stream(0, "n"))
        # s = 0: the start has zero data component, unit noise coefficient
        e = schedule.stage_end(2, True)
        from cascadeflow.grids import _block_mean
        from cascadeflow.paths import _stage_factors

        down, _ = _stage_factors(schedule, 2, DeltaPath.full(3))
        noise = (x_end - e * _block_mean(x1, down)) / (1 - e)
        assert np.allclose(x_start, noise, atol=1e-12)

    def test_finest_end_is_clean_window(self, schedule, rng):
        x1 = rng.standard_normal((2, 12, 8, 8))
        _, x_end = sample_endpoints(x1, schedule, 0, DeltaPath.full(3), stream(0, "n"))
        assert np.array_equal(x_end, x1)  # e_0 = 1 with identity factors

    def test_rejects_incompatible_dims(self, schedule, rng):
        x1 = rng.standard_normal((2, 100, 8, 8))  # 100 not divisible by 120
        with pytest.raises(PathError):
            sample_endpoints(x1, schedule, 2, DeltaPath.full(3), stream(0, "n"))


class TestInterpolate:
    def test_endpoints_and_midpoint(self, schedule, rng):
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((2, 3, 4, 4))
        k = 1
        s, e = schedule.start(k), schedule.stage_end(k, True)
        assert np.array_equal(interpolate(a, b, k, s, schedule), a)
        assert np.array_equal(interpolate(a, b, k, e, schedule), b)
        mid = interpolate(a, b, k, (s + e) / 2, schedule)
        assert np.allclose(mid, (a + b) / 2, atol=1e-12)

    def test_rejects_time_outside_segment(self, schedule, rng):
        a = rng.standard_normal((1, 1, 2, 2))
        with pytest.raises(PathError):
            interpolate(a, a, 0, 0.1, schedule)


class TestMakeTrainingSample:
    def test_deterministic_under_seed(self, schedule, tiny_dataset):
        sc = tiny_dataset.scenario("toy-a")
        s1 = make_training_sample(sc.targets[0], sc.forcings, schedule, stream(9, "t"))
        s2 = make_training_sample(sc.targets[0], sc.forcings, schedule, stream(9, "t"))
        assert s1.stage == s2.stage and s1.t == s2.t
        assert np.array_equal(s1.x_t, s2.x_t)
        assert np.array_equal(s1.u_target, s2.u_target)

    def test_target_is_endpoint_difference(self, schedule, tiny_dataset):
        sc = tiny_dataset.scenario("toy-a")
        s = make_training_sample(sc.targets[0], sc.forcings, schedule, stream(1, "t"))
        assert np.array_equal(s.u_target, s.x_end - s.x_start)

    def test_stage_frequencies_uniform(self, schedule, tiny_dataset):
        sc = tiny_dataset.scenario("toy-a")
        rng = stream(3, "freq")
        counts = np.zeros(3)
        n = 1200
        for _ in range(n):
            counts[make_training_sample(sc.targets[0], sc.forcings, schedule, rng).stage] += 1
        assert np.all(np.abs(counts / n - 1 / 3) < 0.05)

    def test_single_path_mode(self, schedule, tiny_dataset):
        sc = tiny_dataset.scenario("toy-a")
        rng = stream(4, "sp")
        for _ in range(30):
            s = make_training_sample(sc.targets[0], sc.forcings, schedule, rng, multi_timescale=False)
            assert s.delta_path.flags == (1, 1)

    def test_sample_shapes_follow_path(self, schedule, tiny_dataset):
        sc = tiny_dataset.scenario("toy-a")
        rng = stream(5, "shapes")
        widths = {0: 12, 1: 10}
        for _ in range(60):
            s = make_training_sample(sc.targets[0], sc.forcings, schedule, rng)
            tau = s.delta_path.timescale_of_stage(s.stage)
            rh, rw = schedule.cumulative_spatial(s.stage)
            expect_hw = (8 // rh, 12 // rw)
            t_expected = widths.get(tau, 240 // schedule.ladder_temporal(tau) if tau == 2 else None)
            if tau == 2:
                t_expected = 240 // 120
            assert s.x_t.shape[2:] == expect_hw
            assert s.x_t.shape[1] == t_expected
            assert s.cond.forcing.shape == s.x_t.shape[:1] + s.x_t.shape[1:]

    def test_temporally_frozen_paths_keep_time_axis(self, schedule, tiny_dataset):
        # spatial-only refinement between consecutive stages: the time axis
        # of start and end latents is identical frame content at stage k
        sc = tiny_dataset.scenario("toy-a")
        rng = stream(8, "frozen")
        seen = 0
        for _ in range(200):
            s = make_training_sample(sc.targets[0], sc.forcings, schedule, rng)
            if s.stage < 2 and s.delta_path.flags[s.stage] == 0:
                assert s.x_start.shape[1] == s.x_end.shape[1]
                seen += 1
        assert seen > 0

    def test_rejects_misaligned_forcings(self, schedule, tiny_dataset):
        sc = tiny_dataset.scenario("toy-a")
        with pytest.raises(PathError):
            make_training_sample(sc.targets[0], sc.forcings[:, :-12], schedule, stream(0, "x"))


class TestBuildConditioning:
    def test_forcing_is_mean_pooled(self, schedule, tiny_dataset):
        sc = tiny_dataset.scenario("toy-a")
        cond = build_conditioning(sc.forcings, schedule, 1, 1, 0.5, 0, 120)
        from cascadeflow.grids import ResampleFactors, _block_mean

        expected = _block_mean(sc.forcings[:, :120], ResampleFactors(2, 2, 12))
        assert np.allclose(cond.forcing, expected, atol=1e-12)
        assert cond.forcing.shape == (2, 10, 4, 6)

    def test_phase_positions(self, schedule, tiny_dataset):
        sc = tiny_dataset.scenario("toy-a")
        cond = build_conditioning(sc.forcings, schedule, 0, 0, 0.9, 12, 12)
        assert np.allclose(cond.phase, np.arange(12) / 12)

    def test_rejects_window_outside_span(self, schedule, tiny_dataset):
        sc = tiny_dataset.scenario("toy-a")
        with pytest.raises(PathError):
            build_conditioning(sc.forcings, schedule, 0, 0, 0.9, 235, 12)
