"""Run configuration: defaults, file loading, and object construction.

A run config is one JSON document with schedule/model/train/sample/data
blocks. Commands deep-merge (file -> flag overrides) over the defaults and
persist the resolved config verbatim next to their outputs, so any run can
be replayed byte-for-byte from its own artifacts.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError
from .grids import ResampleFactors
from .model import ModelConfig, VelocityModel
from .schedule import PyramidSchedule, StageSpec, build_schedule
from .training import TrainConfig

DEFAULT_CONFIG = {
    "seed": 0,
    "schedule": [
        {"timescale": "monthly", "r_h": 2, "r_w": 2, "r_t": 12, "frames": 12},
        {"timescale": "yearly", "r_h": 2, "r_w": 2, "r_t": 10, "frames": 10},
        {"timescale": "decadal"},
    ],
    "model": {
        "data_channels": 2,
        "forcing_channels": 2,
        "width": 24,
        "blocks": 2,
        "embed_dim": 16,
        "embed_hidden": 64,
        "cond_dim": 160,
    },
    "train": {
        "steps": 1500,
        "batch_size": 6,
        "learning_rate": 2e-3,
        "warmup_steps": 50,
        "grad_clip": 1.0,
        "multi_timescale": True,
        "log_every": 25,
    },
    "sample": {"steps": 90, "ensemble": 5},
    "data": {"years": 80, "n_lat": 24, "n_lon": 36},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a JSON object")
        cfg = _deep_merge(cfg, loaded)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def persist_config(cfg: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=2) + "\n"
    )


def schedule_from_config(cfg: dict) -> PyramidSchedule:
    stages = []
    entries = cfg.get("schedule")
    if not entries:
        raise ConfigError("config needs a non-empty 'schedule' list")
    for i, entry in enumerate(entries):
        label = entry.get("timescale")
        if not label:
            raise ConfigError(f"schedule entry {i} needs a 'timescale' label")
        if i < len(entries) - 1:
            try:
                factors = ResampleFactors(entry["r_h"], entry["r_w"], entry.get("r_t", 1))
            except KeyError as exc:
                raise ConfigError(f"schedule entry {i} ({label}) is missing {exc}") from exc
            stages.append(StageSpec(label, factors, entry.get("frames")))
        else:
            stages.append(StageSpec(label, None, entry.get("frames")))
    return build_schedule(stages)


def model_from_config(cfg: dict, seed: int | None = None) -> VelocityModel:
    mc = ModelConfig(**cfg.get("model", {}))
    return VelocityModel(mc, seed=cfg.get("seed", 0) if seed is None else seed)


def train_config_from(cfg: dict, **extra) -> TrainConfig:
    block = dict(cfg.get("train", {}))
    block.setdefault("seed", cfg.get("seed", 0))
    block.update(extra)
    return TrainConfig(**block)
