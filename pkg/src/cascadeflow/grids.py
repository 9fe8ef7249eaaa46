"""Field containers and the exact resampling operators.

Data layout is ``(channel, time, lat, lon)``. Downsampling is block mean
pooling, so a coarse frame is exactly the average of its fine source block
(a yearly mean is exactly the mean of its 12 months). Upsampling is
nearest-neighbor replication. Both are needed in precisely these forms:
replication makes the covariance of an upsampled white field the all-ones
block matrix that the stage-transition algebra assumes, and mean pooling
makes ``downsample(upsample(x)) == x`` hold exactly.

The private ``_block_mean`` / ``_replicate`` kernels accept arbitrary
leading batch axes and act on the trailing ``(time, lat, lon)`` axes; the
Monte Carlo certification suites rely on this to vectorize over draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridError

_AXIS_NAMES = ("time", "lat", "lon")


@dataclass(frozen=True)
class ResampleFactors:
    """Integer resampling factors along (lat, lon, time)."""

    r_h: int
    r_w: int
    r_t: int = 1

    def __post_init__(self):
        for name in ("r_h", "r_w", "r_t"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise GridError(f"resampling factor {name} must be a positive integer, got {v!r}")

    @property
    def block_size(self) -> int:
        return int(self.r_t * self.r_h * self.r_w)

    def as_tuple(self) -> tuple[int, int, int]:
        """Factors in array-axis order (time, lat, lon)."""
        return (int(self.r_t), int(self.r_h), int(self.r_w))

    def with_temporal(self, r_t: int) -> "ResampleFactors":
        return ResampleFactors(self.r_h, self.r_w, r_t)


@dataclass(frozen=True)
class FieldGrid:
    """A (channel, time, lat, lon) array of physical fields plus grid metadata."""

    data: np.ndarray
    lat_degrees: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        lat = np.asarray(self.lat_degrees, dtype=np.float64)
        if data.ndim != 4:
            raise GridError(f"field data must be 4-d (channel, time, lat, lon), got shape {data.shape}")
        if min(data.shape) < 1:
            raise GridError(f"all dimensions must be >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise GridError("field data contains non-finite values")
        if lat.ndim != 1 or lat.shape[0] != data.shape[2]:
            raise GridError(
                f"lat_degrees must have length n_lat={data.shape[2]}, got shape {lat.shape}"
            )
        if not np.all(np.diff(lat) > 0):
            raise GridError("lat_degrees must be strictly increasing")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "lat_degrees", lat)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_time(self) -> int:
        return self.data.shape[1]

    @property
    def n_lat(self) -> int:
        return self.data.shape[2]

    @property
    def n_lon(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


def _check_divisible(shape: tuple[int, ...], factors: ResampleFactors) -> None:
    for axis_name, size, factor in zip(_AXIS_NAMES, shape[-3:], factors.as_tuple()):
        if size % factor != 0:
            raise GridError(
                f"{axis_name} axis of size {size} is not divisible by factor {factor}"
            )


def _block_mean(a: np.ndarray, factors: ResampleFactors) -> np.ndarray:
    """Mean-pool the trailing (time, lat, lon) axes by integer factors."""
    rt, rh, rw = factors.as_tuple()
    if rt == rh == rw == 1:
        return np.array(a, copy=True)
    _check_divisible(a.shape, factors)
    t, h, w = a.shape[-3:]
    lead = a.shape[:-3]
    blocked = a.reshape(lead + (t // rt, rt, h // rh, rh, w // rw, rw))
    return blocked.mean(axis=(-5, -3, -1))


def _replicate(a: np.ndarray, factors: ResampleFactors) -> np.ndarray:
    """Nearest-neighbor expand the trailing (time, lat, lon) axes."""
    rt, rh, rw = factors.as_tuple()
    out = a
    if rt > 1:
        out = np.repeat(out, rt, axis=-3)
    if rh > 1:
        out = np.repeat(out, rh, axis=-2)
    if rw > 1:
        out = np.repeat(out, rw, axis=-1)
    if out is a:
        out = np.array(a, copy=True)
    return out


def _coarsen_lat(lat: np.ndarray, r_h: int) -> np.ndarray:
    if r_h == 1:
        return lat.copy()
    return lat.reshape(-1, r_h).mean(axis=1)


def _refine_lat(lat: np.ndarray, r_h: int) -> np.ndarray:
    # Re-subdivide each row into r_h sub-centers using the local spacing;
    # block means of the result recover the parent rows exactly.
    if r_h == 1:
        return lat.copy()
    spacing = np.gradient(lat) if lat.size > 1 else np.array([1.0])
    offsets = (np.arange(r_h) + 0.5) / r_h - 0.5
    fine = lat[:, None] + spacing[:, None] * offsets[None, :]
    fine = fine.reshape(-1)
    if not np.all(np.diff(fine) > 0):
        raise GridError("cannot refine latitudes into strictly increasing sub-centers")
    return fine


def downsample(x: FieldGrid, f: ResampleFactors) -> FieldGrid:
    """Block mean pooling; each output cell is the mean of its source block."""
    _check_divisible(x.data.shape, f)
    return FieldGrid(_block_mean(x.data, f), _coarsen_lat(x.lat_degrees, f.r_h))


def upsample(x: FieldGrid, f: ResampleFactors) -> FieldGrid:
    """Nearest-neighbor replication; each input cell fills an r_t*r_h*r_w block."""
    return FieldGrid(_replicate(x.data, f), _refine_lat(x.lat_degrees, f.r_h))


def slice_time(x: FieldGrid, indices) -> FieldGrid:
    """Select a strictly increasing subset of time frames, content untouched."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size < 1:
        raise GridError("time indices must be a non-empty 1-d sequence")
    if np.any(idx < 0) or np.any(idx >= x.n_time):
        raise GridError(f"time indices out of range [0, {x.n_time})")
    if idx.size > 1 and not np.all(np.diff(idx) > 0):
        raise GridError("time indices must be strictly increasing")
    return FieldGrid(x.data[:, idx], x.lat_degrees)


def area_weights(lat_degrees) -> np.ndarray:
    """Cosine-latitude area weights normalized so their mean is exactly 1."""
    lat = np.asarray(lat_degrees, dtype=np.float64)
    if lat.ndim != 1 or lat.size < 1:
        raise GridError("lat_degrees must be a non-empty 1-d sequence")
    if np.any(np.abs(lat) > 90.0):
        raise GridError("latitudes must lie in [-90, 90] degrees")
    w = np.cos(np.deg2rad(lat))
    total = w.sum()
    if total <= 0:
        raise GridError("degenerate latitudes: cosine weights sum to zero")
    return w * (lat.size / total)
