"""Area-weighted ensemble verification metrics.

Bias and RMSE score the member-averaged prediction; CRPS uses the unbiased
(fair) ensemble estimator whose spread term is scaled by 1/(2E(E-1)) over
ordered member pairs. A single-member ensemble has no defined spread term
and the score reduces to the weighted mean absolute error. Metrics over
multi-slice fields are computed per (channel, time) slice and averaged
uniformly over slices.
"""

from __future__ import annotations

import numpy as np

from .errors import GridError
from .grids import area_weights


def _check_shapes(x: np.ndarray, y: np.ndarray, w: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 3:
        raise GridError(f"ensemble must be (members, lat, lon), got shape {x.shape}")
    if y.shape != x.shape[1:]:
        raise GridError(f"target shape {y.shape} does not match ensemble {x.shape}")
    if w.shape != (x.shape[1],):
        raise GridError(f"weights must have length n_lat={x.shape[1]}, got {w.shape}")
    return x, y, w


def bias(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Area-weighted mean of the member-averaged error, sign preserved."""
    x, y, w = _check_shapes(x, y, w)
    err = x.mean(axis=0) - y
    return float((w[:, None] * err).sum() / err.size)


def rmse(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    x, y, w = _check_shapes(x, y, w)
    err = x.mean(axis=0) - y
    return float(np.sqrt((w[:, None] * err**2).sum() / err.size))


def crps(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Fair CRPS; reduces to weighted MAE for a single member."""
    x, y, w = _check_shapes(x, y, w)
    n_members = x.shape[0]
    skill = np.abs(x - y[None]).mean(axis=0)
    if n_members == 1:
        cell = skill
    else:
        spread = np.abs(x[:, None] - x[None, :]).sum(axis=(0, 1)) / (
            2.0 * n_members * (n_members - 1)
        )
        cell = skill - spread
    return float((w[:, None] * cell).sum() / cell.size)


def evaluate_ensemble(
    preds: np.ndarray, target: np.ndarray, lat_degrees
) -> dict[str, dict[str, float]]:
    """Slice-wise metrics for (E, C, T, lat, lon) predictions vs (C, T, lat, lon) targets.

    Returns per-channel-index scores plus an 'overall' uniform average.
    """
    preds = np.asarray(preds, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if preds.ndim != 5 or target.ndim != 4 or preds.shape[1:] != target.shape:
        raise GridError(
            f"expected preds (E, C, T, lat, lon) matching target, got {preds.shape} vs {target.shape}"
        )
    w = area_weights(lat_degrees)
    out: dict[str, dict[str, float]] = {}
    totals = {"crps": 0.0, "rmse": 0.0, "bias": 0.0}
    n_channels, n_time = target.shape[0], target.shape[1]
    for c in range(n_channels):
        scores = {"crps": 0.0, "rmse": 0.0, "bias": 0.0}
        for t in range(n_time):
            scores["crps"] += crps(preds[:, c, t], target[c, t], w)
            scores["rmse"] += rmse(preds[:, c, t], target[c, t], w)
            scores["bias"] += bias(preds[:, c, t], target[c, t], w)
        for key in scores:
            scores[key] /= n_time
            totals[key] += scores[key] / n_channels
        out[str(c)] = scores
    out["overall"] = totals
    return out
