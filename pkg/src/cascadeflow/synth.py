"""Synthetic forcing -> field scenarios with analytically known moments.

Each scenario has two monthly target channels (temperature-like and
precipitation-like anomalies) driven by two forcing channels (a global
ramp broadcast everywhere, and a pulsed spatial aerosol map):

    y_c(m,i,j) = trend_c * g(m) * P_c(i,j)
               - pulse_c * p(m) * Q_c(i,j)
               + seasonal_c * S_c(i) * cyc_c(m mod 12)
               + internal noise

The forced part is a closed-form function of the scenario parameters, so
the manifest can carry exact per-cell means, the exact forced global-mean
series, and the exact internal-variability scale of area-weighted means.
The seasonal factors sum to zero over any calendar year, so yearly means
contain no seasonal term, and yearly means of the generated monthly fields
are *exactly* their 12-frame block means.

Internal variability is spatially correlated: white noise smoothed by a
fixed kernel (periodic in longitude), row-normalized so the per-cell
standard deviation is exactly the configured value. Because the noise
operator is an explicit matrix, the variance of any weighted mean is exact
algebra rather than an estimate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContainerError, GridError
from .grids import area_weights
from .rng import stream

TARGET_CHANNELS = ("temperature", "precipitation")
FORCING_CHANNELS = ("ghg", "aerosol")


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: str
    years: int = 80
    members: int = 3
    n_lat: int = 24
    n_lon: int = 36
    ramp: float = 1.0  # trend amplitude: ghg forcing reached at the end of the span
    seasonal_amplitude: float = 0.8
    aerosol_pulses: tuple[tuple[float, float, float], ...] = ()  # (center month, width, height)
    noise_std: float = 0.45
    correlation_cells: float = 2.2

    def __post_init__(self):
        if self.years < 10 or self.years % 10 != 0:
            raise GridError(f"years must be a positive multiple of 10, got {self.years}")
        if self.n_lat % 4 != 0 or self.n_lon % 4 != 0:
            raise GridError("grid dims must be divisible by 4 (two x2 spatial stages)")
        if self.members < 1:
            raise GridError("members must be >= 1")
        if self.noise_std < 0 or self.correlation_cells <= 0:
            raise GridError("noise parameters out of range")

    @property
    def months(self) -> int:
        return self.years * 12


@dataclass
class ScenarioData:
    spec: ScenarioSpec
    role: str
    forcings: np.ndarray  # (2, months, n_lat, n_lon)
    targets: list  # per member, (2, months, n_lat, n_lon)
    moments: dict


@dataclass
class ScenarioDataset:
    lat_degrees: np.ndarray
    timescale: str
    scenarios: dict = field(default_factory=dict)

    def add(self, data: ScenarioData) -> None:
        self.scenarios[data.spec.scenario_id] = data

    def training_pairs(self):
        """(targets, forcings) for every member of every train scenario."""
        pairs = []
        for sid in sorted(self.scenarios):
            sc = self.scenarios[sid]
            if sc.role == "train":
                for member in sc.targets:
                    pairs.append((member, sc.forcings))
        return pairs

    def scenario(self, scenario_id: str) -> ScenarioData:
        try:
            return self.scenarios[scenario_id]
        except KeyError:
            raise ContainerError(
                f"unknown scenario {scenario_id!r}; have {sorted(self.scenarios)}"
            ) from None


def grid_latitudes(n_lat: int) -> np.ndarray:
    """Equally spaced cell-center latitudes covering both hemispheres."""
    step = 180.0 / n_lat
    return -90.0 + (np.arange(n_lat) + 0.5) * step


# ---- deterministic (forced) component ---------------------------------------


def _patterns(lat: np.ndarray, n_lon: int):
    """Smooth response/forcing patterns on the grid; all O(1)."""
    lat_rad = np.deg2rad(lat)[:, None]
    lon_rad = (2.0 * np.pi * (np.arange(n_lon) + 0.5) / n_lon)[None, :]
    ones = np.ones((lat.size, n_lon))
    trend_t = 1.0 + 0.8 * np.sin(lat_rad) ** 2 + 0.2 * np.cos(lon_rad) * np.cos(lat_rad) * ones
    trend_p = 0.5 + 0.5 * np.cos(lat_rad) ** 2 + 0.2 * np.sin(lon_rad) * np.cos(lat_rad) * ones
    aero_forcing = np.exp(-(((lat[:, None] - 30.0) / 25.0) ** 2)) * (
        1.0 + 0.3 * np.cos(lon_rad)
    ) * ones
    aero_resp_t = np.exp(-(((lat[:, None] - 20.0) / 35.0) ** 2)) * ones
    aero_resp_p = np.exp(-(((lat[:, None] + 5.0) / 30.0) ** 2)) * ones
    seas_t = np.sin(lat_rad) * ones
    seas_p = np.cos(lat_rad) * ones
    return {
        "trend": (trend_t, trend_p),
        "aero_forcing": aero_forcing,
        "aero_resp": (aero_resp_t, aero_resp_p),
        "seasonal": (seas_t, seas_p),
    }


_TREND_GAIN = (1.2, 0.8)  # per-channel response to the ghg ramp
_PULSE_GAIN = (0.7, 0.4)  # per-channel response to the aerosol pulse


def _ghg_series(spec: ScenarioSpec) -> np.ndarray:
    return spec.ramp * (np.arange(spec.months) + 1) / spec.months


def _pulse_series(spec: ScenarioSpec) -> np.ndarray:
    m = np.arange(spec.months, dtype=np.float64)
    p = np.zeros(spec.months)
    for center, width, height in spec.aerosol_pulses:
        p += height * np.exp(-(((m - center) / width) ** 2))
    return p


def forced_fields(spec: ScenarioSpec) -> tuple[np.ndarray, np.ndarray]:
    """(forcings, forced targets), both (2, months, n_lat, n_lon), noise-free."""
    lat = grid_latitudes(spec.n_lat)
    pat = _patterns(lat, spec.n_lon)
    g = _ghg_series(spec)
    p = _pulse_series(spec)
    months = np.arange(spec.months)
    seas_cycle_t = np.cos(2.0 * np.pi * (months % 12) / 12.0)
    seas_cycle_p = np.sin(2.0 * np.pi * (months % 12) / 12.0)

    forcings = np.empty((2, spec.months, spec.n_lat, spec.n_lon))
    forcings[0] = g[:, None, None]
    forcings[1] = p[:, None, None] * pat["aero_forcing"][None]

    targets = np.empty((2, spec.months, spec.n_lat, spec.n_lon))
    for c, cycle in enumerate((seas_cycle_t, seas_cycle_p)):
        targets[c] = (
            _TREND_GAIN[c] * g[:, None, None] * pat["trend"][c][None]
            - _PULSE_GAIN[c] * p[:, None, None] * pat["aero_resp"][c][None]
            + spec.seasonal_amplitude * cycle[:, None, None] * pat["seasonal"][c][None]
        )
    return forcings, targets


# ---- internal variability ----------------------------------------------------

_noise_operator_cache: dict = {}


def noise_operator(n_lat: int, n_lon: int, correlation_cells: float) -> np.ndarray:
    """Row-normalized smoothing matrix L: eta = L @ z has per-cell variance 1.

    Gaussian kernel over cell distance, periodic in longitude, clamped at
    the latitude edges. Dense (n_lat*n_lon)^2, fine at desk scale.
    """
    key = (n_lat, n_lon, float(correlation_cells))
    if key in _noise_operator_cache:
        return _noise_operator_cache[key]
    ii = np.arange(n_lat)
    jj = np.arange(n_lon)
    dlat = ii[:, None] - ii[None, :]
    djj = np.abs(jj[:, None] - jj[None, :])
    dlon = np.minimum(djj, n_lon - djj)
    k_lat = np.exp(-0.5 * (dlat / correlation_cells) ** 2)
    k_lon = np.exp(-0.5 * (dlon / correlation_cells) ** 2)
    kernel = np.einsum("ab,cd->acbd", k_lat, k_lon).reshape(n_lat * n_lon, n_lat * n_lon)
    norms = np.sqrt((kernel**2).sum(axis=1, keepdims=True))
    op = kernel / norms
    _noise_operator_cache[key] = op
    return op


def weighted_mean_noise_std(spec: ScenarioSpec) -> float:
    """Exact std of the area-weighted global mean of one month's noise."""
    lat = grid_latitudes(spec.n_lat)
    w = area_weights(lat)
    a = np.repeat(w / (spec.n_lat * spec.n_lon), spec.n_lon)
    op = noise_operator(spec.n_lat, spec.n_lon, spec.correlation_cells)
    return float(spec.noise_std * np.linalg.norm(op.T @ a))


# ---- generation ---------------------------------------------------------------


def generate(spec: ScenarioSpec, seed: int, role: str = "train") -> ScenarioDataset:
    """Generate one scenario: shared forced component, per-member noise."""
    lat = grid_latitudes(spec.n_lat)
    forcings, forced = forced_fields(spec)
    op = noise_operator(spec.n_lat, spec.n_lon, spec.correlation_cells)
    members = []
    for member in range(spec.members):
        rng = stream(seed, "internal", spec.scenario_id, member)
        z = rng.standard_normal((2 * spec.months, spec.n_lat * spec.n_lon))
        eta = (z @ op.T).reshape(2, spec.months, spec.n_lat, spec.n_lon)
        members.append(forced + spec.noise_std * eta)

    w = area_weights(lat)
    cell_weight = np.repeat(w[:, None], spec.n_lon, axis=1) / (spec.n_lat * spec.n_lon)
    forced_gm_monthly = np.einsum("ctij,ij->ct", forced, cell_weight)
    forced_gm_yearly = forced_gm_monthly.reshape(2, spec.years, 12).mean(axis=2)
    gm_noise_monthly = weighted_mean_noise_std(spec)
    moments = {
        "noise_std_cell": spec.noise_std,
        "noise_std_gm_monthly": gm_noise_monthly,
        "noise_std_gm_yearly": gm_noise_monthly / np.sqrt(12.0),
        "forced_gm_yearly": forced_gm_yearly.tolist(),
    }
    dataset = ScenarioDataset(lat_degrees=lat, timescale="monthly")
    dataset.add(ScenarioData(spec=spec, role=role, forcings=forcings, targets=members, moments=moments))
    return dataset


def merge(datasets) -> ScenarioDataset:
    datasets = list(datasets)
    base = datasets[0]
    for other in datasets[1:]:
        if not np.array_equal(other.lat_degrees, base.lat_degrees):
            raise ContainerError("cannot merge datasets on different grids")
        for sid, sc in other.scenarios.items():
            if sid in base.scenarios:
                raise ContainerError(f"duplicate scenario {sid!r} while merging")
            base.scenarios[sid] = sc
    return base


def default_scenario_specs(years: int = 80, n_lat: int = 24, n_lon: int = 36):
    """Three train scenarios plus one held-out scenario at desk scale."""
    common = dict(years=years, n_lat=n_lat, n_lon=n_lon)
    months = years * 12
    train = [
        ScenarioSpec("ramp-low", members=3, ramp=0.4, **common),
        ScenarioSpec("ramp-high", members=3, ramp=1.0, **common),
        ScenarioSpec(
            "ramp-pulse",
            members=3,
            ramp=0.7,
            aerosol_pulses=((0.25 * months, 25.0, 1.0), (0.65 * months, 25.0, 0.7)),
            **common,
        ),
    ]
    heldout = ScenarioSpec(
        "ramp-mid",
        members=5,
        ramp=0.75,
        aerosol_pulses=((0.45 * months, 30.0, 0.5),),
        **common,
    )
    return train, heldout


def default_dataset(seed: int = 0, years: int = 80, n_lat: int = 24, n_lon: int = 36) -> ScenarioDataset:
    train_specs, heldout_spec = default_scenario_specs(years, n_lat, n_lon)
    parts = [generate(s, seed, role="train") for s in train_specs]
    parts.append(generate(heldout_spec, seed, role="heldout"))
    return merge(parts)


# ---- climatology baseline -----------------------------------------------------


def climatology_ensemble(
    dataset: ScenarioDataset, n_years: int, n_members: int, rng: np.random.Generator
) -> np.ndarray:
    """Forcing-blind ensemble: yearly fields resampled from the train pool.

    Returns (n_members, 2, n_years, n_lat, n_lon).
    """
    pool = []
    for targets, _ in dataset.training_pairs():
        yearly = targets.reshape(2, -1, 12, *targets.shape[2:]).mean(axis=2)
        pool.append(yearly)
    if not pool:
        raise ContainerError("climatology baseline needs train scenarios")
    pool = np.concatenate(pool, axis=1)  # (2, total_years, lat, lon)
    total = pool.shape[1]
    idx = rng.integers(total, size=(n_members, n_years))
    return pool[:, idx].transpose(1, 0, 2, 3, 4)


# ---- on-disk container --------------------------------------------------------

_MANIFEST = "manifest.json"


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _blob_name(kind: str, scenario_id: str, member: int | None = None) -> str:
    if member is None:
        return f"forcings_{scenario_id}.f32"
    return f"{kind}_{scenario_id}_m{member:03d}.f32"


def _write_blob(path: Path, array_ctij: np.ndarray) -> None:
    # layout on disk is [time][channel][lat][lon], row-major little-endian f32
    path.write_bytes(np.ascontiguousarray(array_ctij.transpose(1, 0, 2, 3)).astype("<f4").tobytes())


def _read_blob(path: Path, shape_ctij: tuple[int, int, int, int]) -> np.ndarray:
    c, t, i, j = shape_ctij
    expected = c * t * i * j * 4
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise ContainerError(f"missing blob {path.name}") from exc
    if len(raw) != expected:
        raise ContainerError(
            f"blob {path.name} is {len(raw)} bytes, expected {expected} "
            f"for dims (time={t}, channel={c}, lat={i}, lon={j})"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(t, c, i, j)
    return data.transpose(1, 0, 2, 3).astype(np.float64)


def write_container(dataset: ScenarioDataset, path) -> None:
    """Write a flat, self-describing directory; byte-stable for equal content."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    scenarios = []
    for sid in sorted(dataset.scenarios):
        sc = dataset.scenarios[sid]
        spec = sc.spec
        _write_blob(path / _blob_name("forcings", sid), sc.forcings)
        for member, target in enumerate(sc.targets):
            _write_blob(path / _blob_name("target", sid, member), target)
        scenarios.append(
            {
                "id": sid,
                "role": sc.role,
                "members": list(range(len(sc.targets))),
                "spec": {
                    "scenario_id": spec.scenario_id,
                    "years": spec.years,
                    "members": spec.members,
                    "n_lat": spec.n_lat,
                    "n_lon": spec.n_lon,
                    "ramp": spec.ramp,
                    "seasonal_amplitude": spec.seasonal_amplitude,
                    "aerosol_pulses": [list(p) for p in spec.aerosol_pulses],
                    "noise_std": spec.noise_std,
                    "correlation_cells": spec.correlation_cells,
                },
                "moments": sc.moments,
            }
        )
    manifest = {
        "format": 1,
        "kind": "scenario-dataset",
        "timescale": dataset.timescale,
        "lat_degrees": dataset.lat_degrees.tolist(),
        "target_channels": list(TARGET_CHANNELS),
        "forcing_channels": list(FORCING_CHANNELS),
        "scenarios": scenarios,
        "provenance": {"generator": "cascadeflow.synth", "format_version": 1},
    }
    (path / _MANIFEST).write_text(_canonical_json(manifest))


def write_samples(path, preds: np.ndarray, lat_degrees, timescale: str, meta: dict | None = None) -> None:
    """Write a generated ensemble (E, C, T, lat, lon) in the container format."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 5:
        raise ContainerError(f"sample ensemble must be 5-d, got shape {preds.shape}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for member in range(preds.shape[0]):
        _write_blob(path / _blob_name("sample", "ens", member), preds[member])
    manifest = {
        "format": 1,
        "kind": "sample-ensemble",
        "timescale": timescale,
        "lat_degrees": np.asarray(lat_degrees, dtype=np.float64).tolist(),
        "target_channels": list(TARGET_CHANNELS),
        "members": preds.shape[0],
        "shape": list(preds.shape[1:]),
        "meta": meta or {},
        "provenance": {"generator": "cascadeflow.sampling", "format_version": 1},
    }
    (path / _MANIFEST).write_text(_canonical_json(manifest))


def read_samples(path):
    """Read a sample-ensemble container -> (preds, lat_degrees, manifest)."""
    path = Path(path)
    try:
        manifest = json.loads((path / _MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise ContainerError(f"no manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise ContainerError(f"malformed manifest at {path}: {exc}") from exc
    if manifest.get("kind") != "sample-ensemble":
        raise ContainerError(f"container at {path} is not a sample ensemble")
    shape = tuple(manifest["shape"])
    preds = np.stack(
        [
            _read_blob(path / _blob_name("sample", "ens", m), shape)
            for m in range(manifest["members"])
        ]
    )
    lat = np.asarray(manifest["lat_degrees"], dtype=np.float64)
    return preds, lat, manifest


def read_container(path) -> ScenarioDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / _MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise ContainerError(f"no manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise ContainerError(f"malformed manifest at {path}: {exc}") from exc
    for key in ("format", "kind", "lat_degrees", "scenarios", "timescale"):
        if key not in manifest:
            raise ContainerError(f"manifest missing required key {key!r}")
    lat = np.asarray(manifest["lat_degrees"], dtype=np.float64)
    dataset = ScenarioDataset(lat_degrees=lat, timescale=manifest["timescale"])
    for entry in manifest["scenarios"]:
        spec_dict = dict(entry["spec"])
        spec_dict["aerosol_pulses"] = tuple(tuple(p) for p in spec_dict.get("aerosol_pulses", []))
        spec = ScenarioSpec(**spec_dict)
        shape = (2, spec.months, spec.n_lat, spec.n_lon)
        forcings = _read_blob(path / _blob_name("forcings", entry["id"]), shape)
        targets = [
            _read_blob(path / _blob_name("target", entry["id"], m), shape)
            for m in entry["members"]
        ]
        dataset.add(
            ScenarioData(
                spec=spec,
                role=entry["role"],
                forcings=forcings,
                targets=targets,
                moments=entry.get("moments", {}),
            )
        )
    return dataset
