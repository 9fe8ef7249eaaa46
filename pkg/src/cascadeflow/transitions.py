"""Stage transitions: rescale, renoise, and optionally funnel in time.

A jump takes the coarse stage's latent at its rolled-back end time e,
optionally slices a time window of interest (funneling), replicates it up
to the fine grid, and restores the fine start law exactly:

    x_fine = ((1-s) + s*sqrt(n)) / sqrt(n) * up(x_coarse) + alpha * n'

where n' has unit variance and within-block correlation -1/(n-1). The
corrective noise is built by mean-removing i.i.d. draws inside each
replication block and rescaling, which achieves that equicorrelation
exactly: replication makes all n entries of a block perfect copies, and the
mean-removed noise cancels precisely that excess correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import TransitionError
from .grids import ResampleFactors, _check_divisible, _replicate
from .paths import DeltaPath
from .schedule import PyramidSchedule, jump_rollback


@dataclass(frozen=True)
class JumpPlan:
    """Resolved parameters for one jump between adjacent stages."""

    from_stage: int
    to_stage: int
    factors: ResampleFactors  # temporal component already path-adjusted
    s: float
    rollback_end: float
    alpha: float
    funnel_indices: tuple[int, ...] | None = None

    @property
    def block_size(self) -> int:
        return self.factors.block_size

    @property
    def rescale(self) -> float:
        # equals s / rollback_end for n > 1, and exactly 1 for n == 1
        n = self.block_size
        if n == 1:
            return 1.0
        return ((1.0 - self.s) + self.s * math.sqrt(n)) / math.sqrt(n)


def plan_jumps(
    schedule: PyramidSchedule,
    delta_path: DeltaPath,
    funnel_choice: dict[int, int] | None = None,
) -> list[JumpPlan]:
    """Jump plans in generation order (coarsest first).

    ``funnel_choice`` maps a destination stage index to the coarse time
    index to funnel into before upsampling; only temporal jumps may funnel.
    """
    if delta_path.n_stages != schedule.n_stages:
        raise TransitionError("delta path and schedule disagree on stage count")
    funnel_choice = dict(funnel_choice or {})
    unknown = set(funnel_choice) - set(range(schedule.n_stages - 1))
    if unknown:
        raise TransitionError(f"funnel targets for nonexistent jumps: {sorted(unknown)}")
    plans = []
    for k in range(schedule.n_stages - 2, -1, -1):
        temporal = bool(delta_path.flags[k])
        factors = schedule.jump_factors(k, temporal)
        s = schedule.start(k)
        e, alpha = jump_rollback(s, factors.block_size)
        funnel = None
        if k in funnel_choice:
            if not temporal:
                raise TransitionError(f"jump into stage {k} is spatial-only and cannot funnel")
            idx = int(funnel_choice[k])
            parent_width = schedule.window_frames(delta_path.timescale_of_stage(k + 1))
            if idx < 0 or (parent_width is not None and idx >= parent_width):
                raise TransitionError(
                    f"funnel index {idx} out of range for a {parent_width}-frame parent window"
                )
            funnel = (idx,)
        plans.append(
            JumpPlan(
                from_stage=k + 1,
                to_stage=k,
                factors=factors,
                s=s,
                rollback_end=e,
                alpha=alpha,
                funnel_indices=funnel,
            )
        )
    return plans


def sample_block_noise(
    shape: tuple[int, ...],
    factors: ResampleFactors,
    rng: np.random.Generator,
) -> np.ndarray:
    """Unit-variance noise with exact correlation -1/(n-1) inside each block.

    Blocks tile the trailing (time, lat, lon) axes by the given factors and
    are independent of each other; block sums are exactly zero.
    """
    n = factors.block_size
    if n == 1:
        raise TransitionError("corrective noise is undefined for block size 1")
    _check_divisible(shape, factors)
    rt, rh, rw = factors.as_tuple()
    t, h, w = shape[-3:]
    lead = tuple(shape[:-3])
    z = rng.standard_normal(shape)
    blocked = z.reshape(lead + (t // rt, rt, h // rh, rh, w // rw, rw))
    blocked = blocked - blocked.mean(axis=(-5, -3, -1), keepdims=True)
    blocked *= math.sqrt(n / (n - 1))
    return blocked.reshape(shape)


def apply_jump(x_end_coarse: np.ndarray, plan: JumpPlan, rng: np.random.Generator) -> np.ndarray:
    """Map a coarse end latent to a fine start latent at flow time s.

    Accepts arbitrary leading batch axes ahead of (channel, time, lat, lon).
    """
    x = np.asarray(x_end_coarse, dtype=np.float64)
    if plan.funnel_indices is not None:
        idx = np.asarray(plan.funnel_indices, dtype=np.int64)
        if np.any(idx < 0) or np.any(idx >= x.shape[-3]):
            raise TransitionError(
                f"funnel indices {plan.funnel_indices} out of range for {x.shape[-3]} frames"
            )
        x = np.take(x, idx, axis=-3)
    up = _replicate(x, plan.factors)
    if plan.block_size == 1:
        return up
    noise = sample_block_noise(up.shape, plan.factors, rng)
    return plan.rescale * up + plan.alpha * noise

