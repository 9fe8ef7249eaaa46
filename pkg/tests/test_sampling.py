import numpy as np
import pytest

import cascadeflow as cf
from cascadeflow.bench import CountingVelocity, analytic_eval_counts, measure_cached_vs_uncached
from cascadeflow.errors import SamplingError
from cascadeflow.oracle import OracleVelocity
from cascadeflow.paths import ConditioningBundle, DeltaPath
from cascadeflow.sampling import LatentCache, SampleRequest, euler_stage, sample, sample_long_sequence


class _ConstantVelocity:
    def __init__(self, value, channels=2):
        self.value = value
        self.data_channels = channels

    def forward(self, x, cond):
        return np.full_like(x, self.value)


@pytest.fixture(scope="module")
def toy():
    spec = cf.ScenarioSpec("toy", years=20, members=1, n_lat=8, n_lon=12, ramp=0.8)
    ds = cf.generate(spec, seed=0, role="train")
    sc = ds.scenario("toy")
    return ds, sc


def request_for(sc, ds, timescale, **kw):
    return SampleRequest(timescale, sc.forcings, ds.lat_degrees, **kw)


class TestEulerStage:
    def test_constant_velocity_integrates_exactly(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        cond = ConditioningBundle(0.0, 0, 0, np.zeros((2, 3, 4, 4)), np.zeros(3))
        out = euler_stage(_ConstantVelocity(0.7), x, 0.0, 1.0, 13, cond)
        assert np.allclose(out, x + 0.7, atol=1e-12)

    def test_single_step_equals_full_interval(self, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        cond = ConditioningBundle(0.0, 0, 0, np.zeros((2, 2, 4, 4)), np.zeros(2))
        out = euler_stage(_ConstantVelocity(-1.3), x, 0.3, 0.9, 1, cond)
        assert np.allclose(out, x - 1.3, atol=1e-12)

    def test_step_halving_first_order(self, schedule, toy):
        # Richardson probe: for a smooth velocity the error drops linearly
        # in the step size, so consecutive halvings shrink the defect ~2x
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.full(3))
        errs = []
        for steps in (6, 12, 24):
            req = request_for(sc, ds, "monthly", period=(0, 0), ensemble=1, steps=3 * steps, seed=3)
            out = sample(oracle, schedule, req)[0].data
            errs.append(np.abs(out - sc.targets[0][:, :12]).mean())
        # the conditional oracle lands exactly at t=1 regardless of steps;
        # probe convergence at an interior checkpoint instead
        x = np.full((2, 2, 4, 4), 0.5)
        cond = ConditioningBundle(0.0, 2, 2, np.zeros((2, 2, 4, 4)), np.zeros(2))

        class Quadratic:
            data_channels = 2

            def forward(self, inner_x, inner_cond):
                return inner_cond.t * inner_x

        exact = None
        defects = []
        for steps in (8, 16, 32, 64, 512):
            out = euler_stage(Quadratic(), x, 0.0, 1.0, steps, cond)
            if steps == 512:
                exact = out
            else:
                defects.append(out)
        errors = [np.abs(d - exact).max() for d in defects]
        ratios = [errors[i] / errors[i + 1] for i in range(len(errors) - 1)]
        assert all(1.6 < r < 2.4 for r in ratios), ratios

    def test_non_finite_state_aborts(self, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        cond = ConditioningBundle(0.0, 0, 0, np.zeros((2, 2, 4, 4)), np.zeros(2))
        with pytest.raises(SamplingError, match="non-finite"):
            euler_stage(_ConstantVelocity(np.inf), x, 0.0, 1.0, 4, cond)


class TestOraclePyramid:
    def test_full_pyramid_lands_on_clean_sequence(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.full(3))
        req = request_for(sc, ds, "monthly", ensemble=1, steps=90, seed=5)
        out = sample(oracle, schedule, req)[0]
        assert out.shape == (2, 240, 8, 12)
        assert np.abs(out.data - sc.targets[0]).max() < 1e-9

    def test_direct_yearly_lands_on_yearly_means(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.for_timescale(3, 1))
        req = request_for(sc, ds, "yearly", ensemble=1, steps=90, seed=5)
        out = sample(oracle, schedule, req)[0]
        truth = sc.targets[0].reshape(2, 20, 12, 8, 12).mean(axis=2)
        assert out.shape == (2, 20, 8, 12)
        assert np.abs(out.data - truth).max() < 1e-9

    def test_direct_decadal_lands_on_decadal_means(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.spatial_only(3))
        req = request_for(sc, ds, "decadal", ensemble=1, steps=90, seed=5)
        out = sample(oracle, schedule, req)[0]
        truth = sc.targets[0].reshape(2, 2, 120, 8, 12).mean(axis=2)
        assert out.shape == (2, 2, 8, 12)
        assert np.abs(out.data - truth).max() < 1e-9


class TestSeedContract:
    def test_members_differ_and_rerun_identical(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.spatial_only(3))
        req = request_for(sc, ds, "decadal", ensemble=3, steps=9, seed=11)
        a = sample(oracle, schedule, req)
        b = sample(oracle, schedule, req)
        for m1, m2 in zip(a, b):
            assert np.array_equal(m1.data, m2.data)
        # members are deterministic at t=1 under the conditional oracle,
        # so compare their initial noise instead via a weak model
        zero = _ConstantVelocity(0.0)
        req2 = request_for(sc, ds, "decadal", ensemble=2, steps=9, seed=11)
        m = sample(zero, schedule, req2)
        assert not np.array_equal(m[0].data, m[1].data)


class TestFunneling:
    def test_funneled_window_equals_full_span_slice(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.full(3))
        req_full = request_for(sc, ds, "monthly", ensemble=1, steps=90, seed=7)
        full = sample(oracle, schedule, req_full)[0].data
        for period in [(0, 0), (1, 3), (1, 9)]:
            req_w = request_for(sc, ds, "monthly", period=period, ensemble=1, steps=90, seed=7)
            window = sample(oracle, schedule, req_w)[0].data
            start = (period[0] * 10 + period[1]) * 12
            assert np.array_equal(window, full[:, start : start + 12])

    def test_funneled_yearly_window(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.for_timescale(3, 1))
        full = sample(oracle, schedule, request_for(sc, ds, "yearly", ensemble=1, steps=90, seed=7))[0].data
        window = sample(
            oracle, schedule, request_for(sc, ds, "yearly", period=(1,), ensemble=1, steps=90, seed=7)
        )[0].data
        assert np.array_equal(window, full[:, 10:20])


class TestRequestValidation:
    def test_steps_not_divisible_rejected(self, schedule, toy):
        ds, sc = toy
        with pytest.raises(SamplingError, match="divisible"):
            sample(_ConstantVelocity(0.0), schedule, request_for(sc, ds, "monthly", steps=91))

    def test_unknown_timescale_rejected(self, schedule, toy):
        ds, sc = toy
        with pytest.raises(cf.ScheduleError):
            sample(_ConstantVelocity(0.0), schedule, request_for(sc, ds, "weekly", steps=90))

    def test_bad_period_rejected(self, schedule, toy):
        ds, sc = toy
        with pytest.raises(SamplingError):
            sample(_ConstantVelocity(0.0), schedule,
                   request_for(sc, ds, "monthly", period=(0,), steps=90))
        with pytest.raises(SamplingError):
            sample(_ConstantVelocity(0.0), schedule,
                   request_for(sc, ds, "monthly", period=(9, 0), steps=90))
        with pytest.raises(SamplingError):
            sample(_ConstantVelocity(0.0), schedule,
                   request_for(sc, ds, "yearly", period=(0, 3), steps=90))

    def test_span_not_divisible_rejected(self, schedule, toy):
        ds, sc = toy
        bad = SampleRequest("monthly", sc.forcings[:, :100], ds.lat_degrees, steps=90)
        with pytest.raises(SamplingError):
            sample(_ConstantVelocity(0.0), schedule, bad)


class TestLongSequenceAndCache:
    def test_long_sequence_matches_direct(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.full(3))
        req = request_for(sc, ds, "monthly", ensemble=1, steps=45, seed=2)
        direct = sample(oracle, schedule, req)[0].data
        cache = LatentCache()
        long_run = sample_long_sequence(oracle, schedule, req, cache=cache)
        assert np.array_equal(long_run.data, direct)

    def test_cache_hits_on_second_pass(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.full(3))
        req = request_for(sc, ds, "monthly", ensemble=1, steps=45, seed=2)
        cache = LatentCache()
        first = sample_long_sequence(oracle, schedule, req, cache=cache)
        hits_before = cache.hits
        second = sample_long_sequence(oracle, schedule, req, cache=cache)
        assert np.array_equal(first.data, second.data)
        assert cache.hits > hits_before

    def test_cold_window_bit_identical_to_cached(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.full(3))
        req = request_for(sc, ds, "monthly", ensemble=1, steps=45, seed=2)
        cache = LatentCache()
        cached = sample_long_sequence(oracle, schedule, req, cache=cache)
        cold = sample(
            oracle, schedule, request_for(sc, ds, "monthly", period=(1, 4), ensemble=1, steps=45, seed=2)
        )[0]
        start = (10 + 4) * 12
        assert np.array_equal(cold.data, cached.data[:, start : start + 12])

    def test_lineage_mismatch_recomputes_with_warning(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.full(3))
        cache = LatentCache()
        req_a = request_for(sc, ds, "monthly", ensemble=1, steps=45, seed=2)
        sample_long_sequence(oracle, schedule, req_a, cache=cache)
        req_b = request_for(sc, ds, "monthly", ensemble=1, steps=45, seed=3)
        sample_long_sequence(oracle, schedule, req_b, cache=cache)
        assert cache.warnings, "expected lineage-mismatch warnings"

    def test_lru_eviction(self):
        cache = LatentCache(max_entries=2)
        cache.put(("a",), "lin", np.zeros(1))
        cache.put(("b",), "lin", np.zeros(1))
        cache.put(("c",), "lin", np.zeros(1))
        assert len(cache) == 2
        assert cache.get(("a",), "lin") is None


class TestEvalCounts:
    def test_measured_equals_analytic_and_monotone(self, schedule, toy):
        ds, sc = toy
        measured = {}
        for ts, tau in [("decadal", 2), ("yearly", 1), ("monthly", 0)]:
            oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.for_timescale(3, tau))
            counter = CountingVelocity(oracle)
            req = request_for(sc, ds, ts, ensemble=1, steps=90, seed=5)
            sample(counter, schedule, req)
            assert counter.calls == analytic_eval_counts(schedule, 240, ts, 90)["total"]
            measured[ts] = counter.calls
        assert measured["decadal"] < measured["yearly"] < measured["monthly"]

    def test_cached_vs_uncached_ratio(self, schedule, toy):
        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.full(3))
        req = request_for(sc, ds, "monthly", ensemble=1, steps=45, seed=5)
        record = measure_cached_vs_uncached(oracle, schedule, req)
        assert record["n_windows"] == 20
        assert record["eval_ratio"] == pytest.approx(1 / 20)

    def test_stage_invocation_counts_for_long_sequence(self, schedule, toy):
        # 20 years of monthly windows: the decadal flow runs once, the
        # yearly flow once per decade, the monthly flow once per year
        from cascadeflow.sampling import _PyramidRun

        ds, sc = toy
        oracle = OracleVelocity(sc.targets[0], schedule, DeltaPath.full(3))
        req = request_for(sc, ds, "monthly", ensemble=1, steps=45, seed=5)
        run = _PyramidRun(oracle, schedule, req, member=0)
        for offset in range(0, 240, 12):
            run.segment(0, offset, 12)
        assert run.segment_runs == {2: 1, 1: 2, 0: 20}
