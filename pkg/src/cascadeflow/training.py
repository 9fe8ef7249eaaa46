"""Flow-matching optimization loop.

The objective is plain squared error between the predicted velocity and the
coupled endpoint difference, averaged over elements within a sample and
then over the batch, so stages with different latent sizes contribute
comparably. Samples in a batch may mix stages, shapes, and refinement
paths; each is pushed through the model individually and gradients are
accumulated. Adam with constant learning rate (optional linear warmup) is
deliberate: the task is small and the loop must be bit-reproducible under a
fixed seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TrainingDiverged, TrainingError
from .model import VelocityModel, save_checkpoint
from .paths import PathSample, make_training_sample
from .rng import stream
from .schedule import PyramidSchedule


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 6
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 50
    grad_clip: float | None = 1.0
    seed: int = 0
    multi_timescale: bool = True
    log_every: int = 25
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise TrainingError("steps must be >= 0, batch_size >= 1, learning_rate > 0")


@dataclass
class TrainReport:
    steps: int
    losses: list = field(default_factory=list)
    moving_average: float = float("nan")
    wall_seconds: float = 0.0
    checkpoint_path: str | None = None


def loss_on_batch(model, batch: list[PathSample]) -> tuple[float, np.ndarray]:
    """Mean per-element squared velocity error and its parameter gradient."""
    if not batch:
        raise TrainingError("empty batch")
    total_loss = 0.0
    grad = np.zeros(model.n_params)
    inv_batch = 1.0 / len(batch)
    for sample in batch:
        v, cache = model._forward_cached(sample.x_t, sample.cond)
        residual = v - sample.u_target
        n_elem = residual.size
        total_loss += float(np.mean(residual**2)) * inv_batch
        cotangent = residual * (2.0 * inv_batch / n_elem)
        grad += model._backward_cached(cache, cotangent)
    if not np.isfinite(total_loss):
        worst = batch[0]
        raise TrainingDiverged(
            f"non-finite loss on batch (stage={worst.stage}, t={worst.t:.4f})",
            stage=worst.stage,
            t=worst.t,
        )
    return total_loss, grad


def draw_batch(
    dataset,
    schedule: PyramidSchedule,
    rng: np.random.Generator,
    batch_size: int,
    multi_timescale: bool = True,
) -> list[PathSample]:
    """Draw training tuples from uniformly chosen train scenarios/members."""
    pairs = dataset.training_pairs()
    if not pairs:
        raise TrainingError("dataset has no scenarios with role 'train'")
    batch = []
    for _ in range(batch_size):
        targets, forcings = pairs[int(rng.integers(len(pairs)))]
        batch.append(
            make_training_sample(targets, forcings, schedule, rng, multi_timescale=multi_timescale)
        )
    return batch


def train(
    model: VelocityModel,
    dataset,
    schedule: PyramidSchedule,
    config: TrainConfig,
    out_dir=None,
) -> TrainReport:
    """Run Adam on the flow-matching objective; deterministic under the seed."""
    rng = stream(config.seed, "train")
    m = np.zeros(model.n_params)
    v = np.zeros(model.n_params)
    report = TrainReport(steps=config.steps)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("")

    t0 = time.perf_counter()
    ema = None
    for step in range(1, config.steps + 1):
        batch = draw_batch(dataset, schedule, rng, config.batch_size, config.multi_timescale)
        try:
            loss, grad = loss_on_batch(model, batch)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"step {step}: {exc}", step=step, stage=exc.stage, t=exc.t) from exc

        if config.grad_clip is not None:
            norm = float(np.linalg.norm(grad))
            if norm > config.grad_clip:
                grad *= config.grad_clip / norm
        lr = config.learning_rate
        if config.warmup_steps > 0 and step <= config.warmup_steps:
            lr *= step / config.warmup_steps
        m = config.beta1 * m + (1 - config.beta1) * grad
        v = config.beta2 * v + (1 - config.beta2) * grad**2
        m_hat = m / (1 - config.beta1**step)
        v_hat = v / (1 - config.beta2**step)
        model.params -= lr * m_hat / (np.sqrt(v_hat) + config.eps)
        if not np.all(np.isfinite(model.params)):
            raise TrainingDiverged(f"non-finite parameters after step {step}", step=step)

        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        report.losses.append(loss)
        wall_ms = (time.perf_counter() - t0) * 1e3
        if log_path is not None and (step % config.log_every == 0 or step == config.steps):
            with log_path.open("a") as fh:
                fh.write(json.dumps({"step": step, "loss": loss, "lr": lr, "wall_ms": wall_ms}) + "\n")
        if (
            out_dir is not None
            and config.checkpoint_every
            and step % config.checkpoint_every == 0
        ):
            save_checkpoint(model, out_dir / f"checkpoint_{step:06d}")

    report.wall_seconds = time.perf_counter() - t0
    report.moving_average = float("nan") if ema is None else float(ema)
    if out_dir is not None:
        final = out_dir / "checkpoint_final"
        save_checkpoint(model, final)
        report.checkpoint_path = str(final)
    return report
