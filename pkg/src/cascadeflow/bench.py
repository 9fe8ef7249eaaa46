"""Model-evaluation accounting for the runtime-scaling comparison.

A "model evaluation" is one forward pass of the velocity network on one
native window; the sampler genuinely issues exactly these calls, so the
measured counts and the analytic counts from the stage plan must agree.
Coarser target timescales need strictly fewer evaluations for the same
span, and caching turns repeated per-window requests from
(windows x full-pipeline) into (one full pipeline + slicing).

The uncached comparator is the no-reuse client: a consumer who wants
window w with the correct joint lineage but keeps no intermediate latents
regenerates the entire fine sequence and slices, paying the full pipeline
once per window. (A funneled cold run would cost steps_per_stage * K per
window, which can never be beaten by more than the fine-stage share; the
cache's advantage is against clients without the funnel-resume machinery.)
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .paths import DeltaPath
from .sampling import LatentCache, SampleRequest, sample, sample_long_sequence
from .schedule import PyramidSchedule


class CountingVelocity:
    """Wrapper that counts forward passes and frames pushed through them."""

    def __init__(self, velocity):
        self.inner = velocity
        self.calls = 0
        self.frames = 0

    @property
    def data_channels(self):
        return self.inner.data_channels

    @property
    def params(self):
        return getattr(self.inner, "params", None)

    def forward(self, x, cond):
        self.calls += 1
        self.frames += x.shape[1]
        return self.inner.forward(x, cond)

    def reset(self):
        self.calls = 0
        self.frames = 0


def analytic_eval_counts(schedule: PyramidSchedule, span_months: int, timescale: str,
                         steps: int) -> dict:
    """Forward-pass counts per stage for one full-span direct sample."""
    tau_star = schedule.timescale_index(timescale)
    delta = DeltaPath.for_timescale(schedule.n_stages, tau_star)
    steps_per_stage = steps // schedule.n_stages
    per_stage = {}
    total = 0
    for k in range(schedule.n_stages):
        tau = delta.timescale_of_stage(k)
        frames = span_months // schedule.ladder_temporal(tau)
        width = schedule.window_frames(tau) or frames
        calls = (frames // width) * steps_per_stage
        per_stage[k] = calls
        total += calls
    return {"per_stage": per_stage, "total": total, "steps_per_stage": steps_per_stage}


def measure_direct(velocity, schedule: PyramidSchedule, request: SampleRequest) -> dict:
    """Run one full-span member and report measured evaluation counts."""
    counter = CountingVelocity(velocity)
    t0 = time.perf_counter()
    members = sample(counter, schedule, replace(request, ensemble=1))
    wall_ms = (time.perf_counter() - t0) * 1e3
    return {
        "timescale": request.timescale,
        "span_months": request.forcings.shape[1],
        "model_evals": counter.calls,
        "frames_processed": counter.frames,
        "wall_ms": wall_ms,
        "output_shape": list(members[0].shape),
    }


def measure_cached_vs_uncached(velocity, schedule: PyramidSchedule,
                               request: SampleRequest) -> dict:
    """Cached long-sequence generation vs per-window full regeneration.

    The cached pass produces every window once, reusing coarse latents. The
    uncached client regenerates the full sequence for each window it wants;
    one such cold run is measured and the total is cold_evals * n_windows.
    """
    tau_star = schedule.timescale_index(request.timescale)
    counter = CountingVelocity(velocity)
    cache = LatentCache(max_entries=4096)
    t0 = time.perf_counter()
    cached_field = sample_long_sequence(counter, schedule, replace(request, ensemble=1), cache=cache)
    cached_ms = (time.perf_counter() - t0) * 1e3
    cached_evals = counter.calls

    width = schedule.window_frames(tau_star)
    span_frames = cached_field.n_time
    n_windows = span_frames // width if width else 1

    counter.reset()
    t0 = time.perf_counter()
    cold_members = sample(counter, schedule, replace(request, ensemble=1, period=None))
    cold_ms = (time.perf_counter() - t0) * 1e3
    cold_evals_per_window = counter.calls
    if not np.array_equal(cold_members[0].data, cached_field.data):
        raise AssertionError("cached long-sequence output diverged from the direct run")

    uncached_total = cold_evals_per_window * n_windows
    return {
        "timescale": request.timescale,
        "n_windows": n_windows,
        "cached_evals": cached_evals,
        "uncached_evals_per_window": cold_evals_per_window,
        "uncached_evals_total": uncached_total,
        "eval_ratio": cached_evals / uncached_total,
        "cached_wall_ms": cached_ms,
        "cold_window_wall_ms": cold_ms,
        "cache_hits": cache.hits,
        "cache_entries": len(cache),
    }
