"""Stage schedule: flow-time boundaries, resampling ladder, jump rollback.

Stages are indexed ``k = 0`` (finest) to ``K-1`` (coarsest). The unit flow
interval is split uniformly, ``s_k = (K-1-k)/K``, and a stage nominally ends
where the next finer one starts. A jump into stage k, however, needs the
coarser latent at a *rolled-back* flow time ``e > s_k``: matching the
covariance of the replicated coarse endpoint against the fine start law

    (s/e)^2 (1-e)^2 + a^2     = (1-s)^2      (diagonal)
    (s/e)^2 (1-e)^2 + a^2 g   = 0            (within block)

with the most signal-preserving equicorrelation ``g = -1/(n-1)`` gives

    e = s*sqrt(n) / ((1-s) + s*sqrt(n)),   a = (1-s)*sqrt((n-1)/n),

where ``n`` is the replication block size of the jump. Stage k+1 therefore
integrates past its nominal end up to this ``e``, and the jump re-enters
stage k at ``s_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ScheduleError
from .grids import ResampleFactors


def gamma_min(n: int) -> float:
    """Most negative within-block correlation (PSD bound) for block size n."""
    if not isinstance(n, (int,)) or n < 2:
        raise ScheduleError(f"equicorrelation bound needs block size n >= 2, got {n!r}")
    return -1.0 / (n - 1)


def jump_rollback(s: float, n: int) -> tuple[float, float]:
    """Rolled-back coarse end time e and corrective-noise weight alpha.

    For ``n == 1`` the jump is a pure pass-through: ``(s, 0)``.
    """
    if not 0.0 <= s < 1.0:
        raise ScheduleError(f"jump start time must satisfy 0 <= s < 1, got {s}")
    if n < 1:
        raise ScheduleError(f"block size must be >= 1, got {n}")
    if n == 1:
        return float(s), 0.0
    root = math.sqrt(n)
    e = s * root / ((1.0 - s) + s * root)
    alpha = (1.0 - s) * math.sqrt((n - 1) / n)
    return e, alpha


@dataclass(frozen=True)
class StageSpec:
    """One pyramid stage.

    ``factors_to_coarser`` are the resampling factors between this stage and
    the next coarser one (None for the coarsest stage). ``frames_per_window``
    is the native temporal window width at this stage's timescale; it
    defaults to the temporal factor, so one window covers exactly one frame
    of the next coarser timescale. None means "the full requested span".
    """

    timescale_label: str
    factors_to_coarser: ResampleFactors | None = None
    frames_per_window: int | None = None


class PyramidSchedule:
    """Immutable stage structure shared by training and inference."""

    def __init__(self, stages: list[StageSpec] | tuple[StageSpec, ...]):
        stages = tuple(stages)
        if len(stages) < 1:
            raise ScheduleError("a schedule needs at least one stage")
        labels = [st.timescale_label for st in stages]
        if len(set(labels)) != len(labels):
            raise ScheduleError(f"duplicate timescale labels: {labels}")
        for k, st in enumerate(stages[:-1]):
            if st.factors_to_coarser is None:
                raise ScheduleError(f"stage {k} ({st.timescale_label}) needs factors_to_coarser")
            if st.frames_per_window is not None and st.frames_per_window < 1:
                raise ScheduleError(f"stage {k}: frames_per_window must be >= 1")
        if stages[-1].factors_to_coarser is not None:
            raise ScheduleError("the coarsest stage must not define factors_to_coarser")
        self.stages = stages
        self.n_stages = len(stages)

    # ---- flow-time boundaries -------------------------------------------

    def start(self, k: int) -> float:
        """Segment start s_k of the uniform partition."""
        self._check_stage(k)
        return (self.n_stages - 1 - k) / self.n_stages

    def nominal_end(self, k: int) -> float:
        """Nominal segment end (= start of the next finer stage, or 1)."""
        self._check_stage(k)
        return (self.n_stages - k) / self.n_stages

    def rollback_end(self, to_stage: int, temporal: bool) -> float:
        """Actual end time of stage ``to_stage + 1`` before jumping into ``to_stage``."""
        return jump_rollback(self.start(to_stage), self.block_size(to_stage, temporal))[0]

    def jump_alpha(self, to_stage: int, temporal: bool) -> float:
        return jump_rollback(self.start(to_stage), self.block_size(to_stage, temporal))[1]

    def stage_end(self, k: int, temporal_jump_below: bool | None = None) -> float:
        """End of stage k's integration interval.

        The finest stage ends at 1. Any other stage ends at the rolled-back
        time of the jump into stage k-1; whether that jump refines time is
        given by ``temporal_jump_below``.
        """
        self._check_stage(k)
        if k == 0:
            return 1.0
        if temporal_jump_below is None:
            temporal_jump_below = True
        return self.rollback_end(k - 1, temporal_jump_below)

    # ---- resampling ladder ----------------------------------------------

    def jump_factors(self, to_stage: int, temporal: bool) -> ResampleFactors:
        """Per-jump factors into ``to_stage``; temporal factor frozen to 1 if not temporal."""
        self._check_stage(to_stage)
        if to_stage >= self.n_stages - 1:
            raise ScheduleError(f"no jump exists into the coarsest stage {to_stage}")
        f = self.stages[to_stage].factors_to_coarser
        return f if temporal else f.with_temporal(1)

    def block_size(self, to_stage: int, temporal: bool) -> int:
        return self.jump_factors(to_stage, temporal).block_size

    def cumulative_spatial(self, k: int) -> tuple[int, int]:
        """Product of (r_h, r_w) over all stages finer than k."""
        self._check_stage(k)
        rh = rw = 1
        for st in self.stages[:k]:
            rh *= st.factors_to_coarser.r_h
            rw *= st.factors_to_coarser.r_w
        return rh, rw

    def ladder_temporal(self, tau: int) -> int:
        """Finest frames per one frame of timescale ``tau`` (full temporal ladder)."""
        self._check_stage(tau)
        c = 1
        for st in self.stages[:tau]:
            c *= st.factors_to_coarser.r_t
        return c

    def window_frames(self, tau: int) -> int | None:
        """Native window width at timescale ``tau`` (None = full span)."""
        self._check_stage(tau)
        st = self.stages[tau]
        if st.frames_per_window is not None:
            return st.frames_per_window
        if st.factors_to_coarser is not None:
            return st.factors_to_coarser.r_t
        return None

    def timescale_index(self, label: str) -> int:
        for i, st in enumerate(self.stages):
            if st.timescale_label == label:
                return i
        raise ScheduleError(f"unknown timescale {label!r}; have "
                            f"{[st.timescale_label for st in self.stages]}")

    def _check_stage(self, k: int) -> None:
        if not 0 <= k < self.n_stages:
            raise ScheduleError(f"stage index {k} out of range [0, {self.n_stages})")

    def __repr__(self):
        parts = ", ".join(st.timescale_label for st in self.stages)
        return f"PyramidSchedule({parts})"


def build_schedule(stage_specs) -> PyramidSchedule:
    """Build and validate a schedule from finest-first stage specs."""
    return PyramidSchedule(list(stage_specs))


def default_schedule() -> PyramidSchedule:
    """Three stages: monthly / yearly / decadal, x2 spatial per jump,
    temporal factors 12 (monthly->yearly) and 10 (yearly->decadal)."""
    return build_schedule(
        [
            StageSpec("monthly", ResampleFactors(2, 2, 12)),
            StageSpec("yearly", ResampleFactors(2, 2, 10)),
            StageSpec("decadal"),
        ]
    )
