"""Analytically exact velocity field for a fixed clean sequence.

For a fixed target window the per-stage law is an affine Gaussian path, so
the marginal velocity has closed form: with end/start data directions
``d = down_k(x1)`` and ``u = up(down_{k+1}(x1))``, stage times s < e, and
stage-normalized time tp,

    m(tp) = tp*e*d + (1-tp)*s*u
    b(tp) = tp*(1-e) + (1-tp)*(1-s)
    v(x)  = (e*d - s*u) + (s-e) * (x - m(tp)) / b(tp).

Integrating this field transports the stage's start law exactly onto its
end law (up to solver error), which makes it the reference velocity for
sampler-level distribution tests without any training in the loop.
"""

from __future__ import annotations

import numpy as np

from .errors import SamplingError
from .paths import ConditioningBundle, DeltaPath, _stage_factors
from .grids import _block_mean, _replicate
from .schedule import PyramidSchedule


class OracleVelocity:
    """Velocity oracle for one fixed finest-resolution sequence."""

    def __init__(self, x1: np.ndarray, schedule: PyramidSchedule, delta: DeltaPath):
        self.x1 = np.asarray(x1, dtype=np.float64)
        if self.x1.ndim != 4:
            raise SamplingError(f"x1 must be (channel, time, lat, lon), got {self.x1.shape}")
        self.schedule = schedule
        self.delta = delta
        self._dirs: dict = {}
        self.calls = 0

    @property
    def data_channels(self) -> int:
        return self.x1.shape[0]

    def _directions(self, k: int, fine_offset: int, fine_length: int):
        key = (k, fine_offset, fine_length)
        if key in self._dirs:
            return self._dirs[key]
        window = self.x1[:, fine_offset : fine_offset + fine_length]
        down_k, jump = _stage_factors(self.schedule, k, self.delta)
        d = _block_mean(window, down_k)
        if k < self.schedule.n_stages - 1:
            down_p, _ = _stage_factors(self.schedule, k + 1, self.delta)
            u = _replicate(_block_mean(window, down_p), jump)
        else:
            u = np.zeros_like(d)
        self._dirs[key] = (d, u)
        return d, u

    def forward(self, x: np.ndarray, cond: ConditioningBundle) -> np.ndarray:
        k = cond.stage
        s = self.schedule.start(k)
        e = self.schedule.stage_end(k, bool(self.delta.flags[k - 1]) if k > 0 else None)
        fine_length = cond.forcing.shape[1] * self.schedule.ladder_temporal(cond.timescale)
        d, u = self._directions(k, cond.fine_offset, fine_length)
        if d.shape != x.shape:
            raise SamplingError(f"oracle direction shape {d.shape} does not match latent {x.shape}")
        tp = (cond.t - s) / (e - s)
        mean = tp * e * d + (1.0 - tp) * s * u
        noise_scale = tp * (1.0 - e) + (1.0 - tp) * (1.0 - s)
        self.calls += 1
        return (e * d - s * u) + (s - e) * (x - mean) / noise_scale
