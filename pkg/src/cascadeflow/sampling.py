"""Inference: staged Euler integration with jumps, funneling, and caching.

Generation starts from pure noise at the coarsest stage and alternates
per-stage Euler integration with rescale-renoise jumps. The learned
velocity is the endpoint difference per unit of *stage-normalized* time, so
each stage integrates tau in [0, 1] in uniform steps while the model is
conditioned on the global flow time (which runs past the nominal boundary
up to the rolled-back end whenever a finer stage follows).

Latents are processed in native windows (a year of months, a decade of
years; the coarsest stage spans the whole request). Every noise draw is
keyed by (seed, member, role, stage, absolute window index), which makes
funneled single-window generation bit-identical to the same window sliced
out of a full-span run, and makes cached and cold generation provably
equal.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import SamplingError
from .grids import FieldGrid
from .paths import ConditioningBundle, DeltaPath, build_conditioning
from .rng import stream
from .schedule import PyramidSchedule
from .transitions import JumpPlan, apply_jump


@dataclass(frozen=True)
class SampleRequest:
    """What to generate: timescale, optional period of interest, ensemble."""

    timescale: str
    forcings: np.ndarray  # (C_forcing, months, lat, lon) for the full span
    lat_degrees: np.ndarray
    period: tuple[int, ...] | None = None
    ensemble: int = 1
    steps: int = 90
    seed: int = 0

    def __post_init__(self):
        forcings = np.asarray(self.forcings, dtype=np.float64)
        lat = np.asarray(self.lat_degrees, dtype=np.float64)
        if forcings.ndim != 4:
            raise SamplingError(f"forcings must be 4-d, got shape {forcings.shape}")
        if self.ensemble < 1:
            raise SamplingError("ensemble size must be >= 1")
        if self.steps < 1:
            raise SamplingError("steps must be >= 1")
        object.__setattr__(self, "forcings", forcings)
        object.__setattr__(self, "lat_degrees", lat)
        if self.period is not None:
            object.__setattr__(self, "period", tuple(int(p) for p in self.period))


class LatentCache:
    """LRU store of stage-end latents keyed by window, qualified by lineage."""

    def __init__(self, max_entries: int = 256):
        self.max_entries = max_entries
        self._entries: OrderedDict = OrderedDict()
        self.warnings: list[dict] = []
        self.hits = 0
        self.misses = 0

    def get(self, key, lineage):
        entry = self._entries.get(key)
        if entry is None:
            self.misses += 1
            return None
        stored_lineage, latent = entry
        if stored_lineage != lineage:
            self.warnings.append(
                {"key": key, "stored": stored_lineage, "requested": lineage, "action": "cold-recompute"}
            )
            self.misses += 1
            return None
        self._entries.move_to_end(key)
        self.hits += 1
        return latent.copy()

    def put(self, key, lineage, latent: np.ndarray) -> None:
        self._entries[key] = (lineage, latent.copy())
        self._entries.move_to_end(key)
        while len(self._entries) > self.max_entries:
            self._entries.popitem(last=False)

    def __len__(self):
        return len(self._entries)


def euler_stage(velocity, x: np.ndarray, t_start: float, t_end: float, n_steps: int,
                cond: ConditioningBundle) -> np.ndarray:
    """Integrate one stage window with explicit Euler in stage time.

    The velocity field is the flow's displacement per unit stage time, so a
    constant velocity u gives exactly ``x + u`` regardless of step count.
    The model is conditioned on the global flow time of each step.
    """
    if n_steps < 1:
        raise SamplingError("euler_stage needs n_steps >= 1")
    x = np.array(x, dtype=np.float64)
    dt = 1.0 / n_steps
    for j in range(n_steps):
        t = t_start + (t_end - t_start) * (j / n_steps)
        v = velocity.forward(x, cond.at_time(t))
        x += dt * v
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state at step {j + 1}/{n_steps} (t={t:.4f})")
    return x


def _params_fingerprint(velocity) -> str:
    params = getattr(velocity, "params", None)
    if params is None:
        return f"velocity:{type(velocity).__name__}"
    return hashlib.blake2b(np.ascontiguousarray(params).tobytes(), digest_size=8).hexdigest()


class _PyramidRun:
    """One ensemble member's generation engine with window memoization."""

    def __init__(self, velocity, schedule: PyramidSchedule, request: SampleRequest,
                 member: int, cache: LatentCache | None = None):
        self.velocity = velocity
        self.schedule = schedule
        self.request = request
        self.member = member
        self.cache = cache
        self.delta = DeltaPath.for_timescale(
            schedule.n_stages, schedule.timescale_index(request.timescale)
        )
        self.steps_per_stage = request.steps // schedule.n_stages
        self.span_months = request.forcings.shape[1]
        self._memo: dict = {}
        self.segment_runs: dict[int, int] = {k: 0 for k in range(schedule.n_stages)}
        self._lineage = (
            request.seed,
            member,
            self.delta.flags,
            self.steps_per_stage,
            _params_fingerprint(velocity),
        )
        for k in range(schedule.n_stages):
            tau = self.delta.timescale_of_stage(k)
            if self.span_months % schedule.ladder_temporal(tau) != 0:
                raise SamplingError(
                    f"forcing span of {self.span_months} months is not divisible by the "
                    f"temporal ladder at stage {k}"
                )

    # -- helpers ------------------------------------------------------------

    def span_frames(self, tau: int) -> int:
        return self.span_months // self.schedule.ladder_temporal(tau)

    def window_width(self, tau: int) -> int:
        return self.schedule.window_frames(tau) or self.span_frames(tau)

    def _noise(self, role: str, k: int, index: int, shape) -> np.ndarray:
        rng = stream(self.request.seed, "member", self.member, role, k, index)
        return rng.standard_normal(shape)

    def _jump_rng(self, k: int, index: int) -> np.random.Generator:
        return stream(self.request.seed, "member", self.member, "jump", k, index)

    # -- core recursion -------------------------------------------------------

    def segment(self, k: int, offset: int, n_frames: int) -> np.ndarray:
        """Stage-k end latent covering frames [offset, offset+n_frames) at its timescale."""
        key = (k, offset, n_frames)
        if key in self._memo:
            return self._memo[key]
        if self.cache is not None:
            hit = self.cache.get(key, self._lineage)
            if hit is not None:
                self._memo[key] = hit
                return hit

        schedule = self.schedule
        tau = self.delta.timescale_of_stage(k)
        width = self.window_width(tau)
        if offset % width != 0 or n_frames % width != 0:
            raise SamplingError(
                f"stage {k} request [{offset}, {offset + n_frames}) not aligned to "
                f"{width}-frame windows"
            )
        rh, rw = schedule.cumulative_spatial(k)
        n_lat = self.request.forcings.shape[2] // rh
        n_lon = self.request.forcings.shape[3] // rw
        channels = self.velocity.data_channels

        if k == schedule.n_stages - 1:
            span = self.span_frames(tau)
            if offset != 0 or n_frames != span:
                raise SamplingError("the coarsest stage is always generated for the full span")
            x0 = self._noise("init", k, 0, (channels, span, n_lat, n_lon))
        else:
            temporal = bool(self.delta.flags[k])
            factors = schedule.jump_factors(k, temporal)
            plan = JumpPlan(
                from_stage=k + 1,
                to_stage=k,
                factors=factors,
                s=schedule.start(k),
                rollback_end=schedule.rollback_end(k, temporal),
                alpha=schedule.jump_alpha(k, temporal),
            )
            tau_p = self.delta.timescale_of_stage(k + 1)
            r_t = factors.r_t if temporal else 1
            p_off, p_n = offset // r_t, n_frames // r_t
            p_width = self.window_width(tau_p)
            a_off = (p_off // p_width) * p_width
            a_end = -(-(p_off + p_n) // p_width) * p_width
            parent = self.segment(k + 1, a_off, a_end - a_off)
            parent = parent[:, p_off - a_off : p_off - a_off + p_n]

            pieces = []
            per_window_parent = width // r_t
            for w0 in range(0, n_frames, width):
                parent_piece = parent[:, w0 // r_t : w0 // r_t + per_window_parent]
                rng = self._jump_rng(k, (offset + w0) // width)
                pieces.append(apply_jump(parent_piece, plan, rng))
            x0 = np.concatenate(pieces, axis=1)

        x = self._integrate_stage(k, tau, x0, offset)
        self._memo[key] = x
        if self.cache is not None:
            self.cache.put(key, self._lineage, x)
        return x

    def _integrate_stage(self, k: int, tau: int, x0: np.ndarray, offset: int) -> np.ndarray:
        schedule = self.schedule
        s = schedule.start(k)
        e = schedule.stage_end(k, bool(self.delta.flags[k - 1]) if k > 0 else None)
        width = self.window_width(tau)
        c_tau = schedule.ladder_temporal(tau)
        self.segment_runs[k] += 1
        out = []
        for w0 in range(0, x0.shape[1], width):
            cond = build_conditioning(
                self.request.forcings, schedule, k, tau, s,
                fine_offset=(offset + w0) * c_tau,
                fine_length=width * c_tau,
                target_timescale=self.delta.timescale_of_stage(0),
            )
            out.append(
                euler_stage(self.velocity, x0[:, w0 : w0 + width], s, e, self.steps_per_stage, cond)
            )
        return np.concatenate(out, axis=1)


def _resolve_period(schedule: PyramidSchedule, tau_star: int, period: tuple[int, ...],
                    span_frames_fn) -> tuple[int, int] | None:
    """Map a coarse-to-fine period chain to (offset, n_frames) at tau_star.

    The first index picks an absolute frame at the coarsest timescale; each
    further index picks a child frame at the next finer timescale. Returns
    None when the chain is empty (full span).
    """
    depth = schedule.n_stages - 1 - tau_star
    if len(period) != depth:
        raise SamplingError(
            f"timescale {schedule.stages[tau_star].timescale_label!r} needs a period of "
            f"{depth} indices (coarse to fine), got {period}"
        )
    if depth == 0:
        return None
    coarsest = schedule.n_stages - 1
    limit = span_frames_fn(coarsest)
    abs_frame = period[0]
    if not 0 <= abs_frame < limit:
        raise SamplingError(f"period index {abs_frame} out of range for {limit} coarse frames")
    tau = coarsest
    for idx in period[1:]:
        child_width = schedule.window_frames(tau - 1)
        if not 0 <= idx < child_width:
            raise SamplingError(
                f"period index {idx} out of range for a {child_width}-frame window"
            )
        abs_frame = abs_frame * child_width + idx
        tau -= 1
    width = schedule.window_frames(tau_star)
    return abs_frame * width, width


def sample(velocity, schedule: PyramidSchedule, request: SampleRequest,
           cache: LatentCache | None = None) -> list[FieldGrid]:
    """Generate an ensemble at the requested timescale (and optional period).

    Members use independent noise lineages under one seed; a rerun with the
    same request is bit-identical.
    """
    if request.steps % schedule.n_stages != 0:
        raise SamplingError(
            f"steps={request.steps} must be divisible by {schedule.n_stages} stages"
        )
    tau_star = schedule.timescale_index(request.timescale)
    members = []
    for member in range(request.ensemble):
        run = _PyramidRun(velocity, schedule, request, member, cache=cache)
        window = None
        if request.period is not None:
            window = _resolve_period(schedule, tau_star, request.period, run.span_frames)
        if window is None:
            offset, n_frames = 0, run.span_frames(tau_star)
        else:
            offset, n_frames = window
            if offset + n_frames > run.span_frames(tau_star):
                raise SamplingError(f"period {request.period} lies outside the forcing span")
        latent = run.segment(0, offset, n_frames)
        members.append(FieldGrid(latent, request.lat_degrees))
    return members


def sample_long_sequence(velocity, schedule: PyramidSchedule, request: SampleRequest,
                         cache: LatentCache | None = None, member: int = 0) -> FieldGrid:
    """Window-by-window long-span generation resuming from cached coarse latents."""
    if request.steps % schedule.n_stages != 0:
        raise SamplingError(
            f"steps={request.steps} must be divisible by {schedule.n_stages} stages"
        )
    if cache is None:
        cache = LatentCache()
    tau_star = schedule.timescale_index(request.timescale)
    run = _PyramidRun(velocity, schedule, request, member, cache=cache)
    span = run.span_frames(tau_star)
    width = run.window_width(tau_star)
    windows = [run.segment(0, off, width) for off in range(0, span, width)]
    return FieldGrid(np.concatenate(windows, axis=1), request.lat_degrees)
