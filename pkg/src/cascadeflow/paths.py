"""Coupled conditional probability paths for training.

A training tuple for stage k pairs a noisy *end* latent at the stage's
(rolled-back) end time with a noisy *start* latent built from the next
coarser stage, both sharing one Gaussian draw:

    x_end   = e * down_k(x1)            + (1 - e) * n
    x_start = s * up(down_{k+1}(x1))    + (1 - s) * n

The regression target is simply ``x_end - x_start``, i.e. the velocity per
unit of stage-normalized time. Multi-timescale training replaces some
temporal refinements with spatial-only ones: a monotone per-jump indicator
path decides, coarse to fine, where the temporal ladder stops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PathError
from .grids import FieldGrid, ResampleFactors, _block_mean, _replicate
from .schedule import PyramidSchedule


@dataclass(frozen=True)
class DeltaPath:
    """Per-jump refinement indicators.

    ``flags[k]`` is 1 when the jump into stage k refines time as well as
    space. Flags must be monotone non-decreasing in k: once the temporal
    ladder stops (a spatial-only jump), every finer jump is spatial-only
    too, which is exactly what makes intermediate-timescale outputs clean.
    """

    flags: tuple[int, ...]

    def __post_init__(self):
        flags = tuple(int(f) for f in self.flags)
        if any(f not in (0, 1) for f in flags):
            raise PathError(f"delta flags must be 0/1, got {self.flags!r}")
        if any(a > b for a, b in zip(flags, flags[1:])):
            raise PathError(
                f"delta flags must be monotone (temporal jumps form a coarse-side prefix), got {flags}"
            )
        object.__setattr__(self, "flags", flags)

    @property
    def n_stages(self) -> int:
        return len(self.flags) + 1

    def timescale_of_stage(self, k: int) -> int:
        """Timescale index stage k operates at under this path."""
        if not 0 <= k < self.n_stages:
            raise PathError(f"stage {k} out of range for {self}")
        return (self.n_stages - 1) - sum(self.flags[k:])

    @classmethod
    def full(cls, n_stages: int) -> "DeltaPath":
        """The all-temporal path: the standard spatiotemporal pyramid."""
        return cls(tuple([1] * (n_stages - 1)))

    @classmethod
    def spatial_only(cls, n_stages: int) -> "DeltaPath":
        return cls(tuple([0] * (n_stages - 1)))

    @classmethod
    def for_timescale(cls, n_stages: int, tau: int) -> "DeltaPath":
        """Path whose finest-stage output sits at timescale ``tau``."""
        if not 0 <= tau < n_stages:
            raise PathError(f"timescale {tau} out of range [0, {n_stages})")
        return cls(tuple(1 if k >= tau else 0 for k in range(n_stages - 1)))


def sample_delta_path(rng: np.random.Generator, n_stages: int = 3) -> DeltaPath:
    """Draw one of the ``n_stages`` valid monotone paths uniformly.

    Decisions run coarse to fine: the remaining-path counting makes every
    prefix length equally likely (for K=3 that is Bernoulli(2/3) for the
    first temporal jump and Bernoulli(1/2) for the second given the first).
    """
    if n_stages < 1:
        raise PathError("need at least one stage")
    flags = [0] * (n_stages - 1)
    for g, k in enumerate(range(n_stages - 2, -1, -1)):
        p_continue = (n_stages - 1 - g) / (n_stages - g)
        if rng.random() < p_continue:
            flags[k] = 1
        else:
            break
    return DeltaPath(tuple(flags))


@dataclass(frozen=True)
class ConditioningBundle:
    """Everything the velocity model sees besides the latent itself.

    ``timescale`` is the latent's own temporal granularity; ``target_timescale``
    is the granularity the whole flow is generating. The pair is what makes
    multi-timescale training well-posed: with monotone refinement paths the
    target timescale identifies the path, and stages whose latents look alike
    (same resolution, same timescale) but belong to flows with different
    hand-off times stop being aliased onto one mixture target.

    ``fine_offset`` records which absolute window (in finest-timescale
    frames) this bundle describes; the network itself does not consume it,
    but window-aware diagnostics and oracle velocities do.
    """

    t: float
    stage: int
    timescale: int
    forcing: np.ndarray  # (C_forcing, T, H, W) at the latent's resolution
    phase: np.ndarray  # (T,) position of each frame within its native window, in [0, 1)
    target_timescale: int = 0
    fine_offset: int = 0

    def __post_init__(self):
        forcing = np.asarray(self.forcing, dtype=np.float64)
        phase = np.asarray(self.phase, dtype=np.float64)
        if forcing.ndim != 4:
            raise PathError(f"conditioning forcing must be 4-d, got shape {forcing.shape}")
        if phase.shape != (forcing.shape[1],):
            raise PathError("phase must have one entry per conditioning frame")
        object.__setattr__(self, "forcing", forcing)
        object.__setattr__(self, "phase", phase)

    def at_time(self, t: float) -> "ConditioningBundle":
        return ConditioningBundle(
            float(t), self.stage, self.timescale, self.forcing, self.phase,
            self.target_timescale, self.fine_offset,
        )


@dataclass(frozen=True)
class PathSample:
    """One flow-matching training tuple."""

    stage: int
    t: float
    x_start: np.ndarray
    x_end: np.ndarray
    x_t: np.ndarray
    u_target: np.ndarray
    delta_path: DeltaPath
    cond: ConditioningBundle


def _as_array(x) -> np.ndarray:
    if isinstance(x, FieldGrid):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _stage_factors(schedule: PyramidSchedule, k: int, path: DeltaPath):
    """(cumulative-down factors at stage k, per-jump up factors into k) under a path."""
    tau = path.timescale_of_stage(k)
    rh, rw = schedule.cumulative_spatial(k)
    down = ResampleFactors(rh, rw, schedule.ladder_temporal(tau))
    if k == schedule.n_stages - 1:
        return down, None
    return down, schedule.jump_factors(k, temporal=bool(path.flags[k]))


def sample_endpoints(
    x1,
    schedule: PyramidSchedule,
    k: int,
    delta_path: DeltaPath,
    noise_source: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Jointly draw the (start, end) latents for stage k with shared noise.

    ``x1`` is a clean window at the finest resolution and timescale whose
    extent matches stage k's window. Returns raw latent arrays shaped like
    the stage-k latent.
    """
    x1 = _as_array(x1)
    if x1.ndim != 4:
        raise PathError(f"x1 must be (channel, time, lat, lon), got shape {x1.shape}")
    if delta_path.n_stages != schedule.n_stages:
        raise PathError(
            f"delta path has {delta_path.n_stages} stages, schedule has {schedule.n_stages}"
        )
    schedule._check_stage(k)

    down_k, jump = _stage_factors(schedule, k, delta_path)
    try:
        mean_end = _block_mean(x1, down_k)
    except Exception as exc:
        raise PathError(f"x1 window incompatible with stage {k} factors: {exc}") from exc

    s = schedule.start(k)
    e = schedule.stage_end(k, bool(delta_path.flags[k - 1]) if k > 0 else None)

    if k < schedule.n_stages - 1:
        down_p, _ = _stage_factors(schedule, k + 1, delta_path)
        coarse = _block_mean(x1, down_p)
        mean_start = _replicate(coarse, jump)
        if mean_start.shape != mean_end.shape:
            raise PathError(
                f"stage {k} start/end shapes disagree: {mean_start.shape} vs {mean_end.shape}"
            )
    else:
        mean_start = np.zeros_like(mean_end)  # s = 0 at the coarsest stage

    noise = noise_source.standard_normal(mean_end.shape)
    x_end = e * mean_end + (1.0 - e) * noise
    x_start = s * mean_start + (1.0 - s) * noise
    return x_start, x_end


def interpolate(
    x_start: np.ndarray,
    x_end: np.ndarray,
    k: int,
    t: float,
    schedule: PyramidSchedule,
    delta_path: DeltaPath | None = None,
) -> np.ndarray:
    """Linear interpolant at flow time t within stage k's interval."""
    if delta_path is None:
        delta_path = DeltaPath.full(schedule.n_stages)
    s = schedule.start(k)
    e = schedule.stage_end(k, bool(delta_path.flags[k - 1]) if k > 0 else None)
    if not s <= t <= e:
        raise PathError(f"flow time {t} outside stage {k} interval [{s}, {e}]")
    tp = (t - s) / (e - s)
    return tp * np.asarray(x_end) + (1.0 - tp) * np.asarray(x_start)


def build_conditioning(
    forcings: np.ndarray,
    schedule: PyramidSchedule,
    k: int,
    tau: int,
    t: float,
    fine_offset: int,
    fine_length: int,
    target_timescale: int = 0,
) -> ConditioningBundle:
    """Slice and coarsen forcings for one stage-k window.

    ``fine_offset``/``fine_length`` address the window in finest-timescale
    frames. Forcings are mean-pooled with the same factors as the latent so
    conditioning stays consistent with target coarsening.
    """
    forcings = np.asarray(forcings, dtype=np.float64)
    if fine_offset < 0 or fine_offset + fine_length > forcings.shape[1]:
        raise PathError(
            f"conditioning window [{fine_offset}, {fine_offset + fine_length}) outside "
            f"forcing span of {forcings.shape[1]} frames"
        )
    rh, rw = schedule.cumulative_spatial(k)
    c_tau = schedule.ladder_temporal(tau)
    window = forcings[:, fine_offset : fine_offset + fine_length]
    coarse = _block_mean(window, ResampleFactors(rh, rw, c_tau))
    n_frames = coarse.shape[1]
    width = schedule.window_frames(tau) or n_frames
    phase = (np.arange(n_frames) % width) / width
    return ConditioningBundle(
        float(t), k, tau, coarse, phase, target_timescale, fine_offset=fine_offset
    )


def make_training_sample(
    x1,
    forcings: np.ndarray,
    schedule: PyramidSchedule,
    rng: np.random.Generator,
    multi_timescale: bool = True,
) -> PathSample:
    """Draw one training tuple: path, stage, window, time, coupled endpoints.

    ``x1`` is the full finest-resolution sequence (channel, month, lat,
    lon); ``forcings`` is temporally aligned with it. The window width is
    the stage's native one at its path timescale, uniformly placed among
    aligned windows.
    """
    x1 = _as_array(x1)
    forcings = np.asarray(forcings, dtype=np.float64)
    if forcings.shape[1] != x1.shape[1]:
        raise PathError(
            f"forcings span {forcings.shape[1]} frames but targets span {x1.shape[1]}"
        )
    K = schedule.n_stages
    path = sample_delta_path(rng, K) if multi_timescale else DeltaPath.full(K)
    k = int(rng.integers(K))
    tau = path.timescale_of_stage(k)
    c_tau = schedule.ladder_temporal(tau)
    if x1.shape[1] % c_tau != 0:
        raise PathError(f"sequence length {x1.shape[1]} not divisible by ladder factor {c_tau}")
    span_frames = x1.shape[1] // c_tau
    width = schedule.window_frames(tau) or span_frames
    if span_frames % width != 0:
        raise PathError(f"span of {span_frames} frames not divisible by window width {width}")
    fine_length = width * c_tau
    window_index = int(rng.integers(x1.shape[1] // fine_length))
    fine_offset = window_index * fine_length

    x1_window = x1[:, fine_offset : fine_offset + fine_length]
    s = schedule.start(k)
    e = schedule.stage_end(k, bool(path.flags[k - 1]) if k > 0 else None)
    t = s + rng.uniform() * (e - s)
    x_start, x_end = sample_endpoints(x1_window, schedule, k, path, rng)
    x_t = interpolate(x_start, x_end, k, t, schedule, path)
    cond = build_conditioning(
        forcings, schedule, k, tau, t, fine_offset, fine_length,
        target_timescale=path.timescale_of_stage(0),
    )
    return PathSample(
        stage=k,
        t=float(t),
        x_start=x_start,
        x_end=x_end,
        x_t=x_t,
        u_target=x_end - x_start,
        delta_path=path,
        cond=cond,
    )
