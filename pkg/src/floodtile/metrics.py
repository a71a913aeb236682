"""Masked RMSE / NSE in target units, plus the RMSE loss gradient."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ERROR_MAP_THRESHOLD = 0.01  # m; smaller errors render as zero

REPORT_COLUMNS = ["run_id", "split", "strategy", "rmse_m", "nse", "n_valid", "max_abs_error_m"]


class MetricError(ValueError):
    pass


def _valid(pred, target, mask):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    n = int(mask.sum())
    if n == 0:
        raise MetricError("zero valid cells")
    return pred[mask].astype(np.float64), target[mask].astype(np.float64), n


def masked_rmse(pred, target, mask) -> float:
    """Root mean squared error over mask-true cells (float64 accumulation)."""
    p, t, n = _valid(pred, target, mask)
    d = p - t
    return float(np.sqrt(np.dot(d, d) / n))


def nse(pred, target, mask) -> float:
    """Nash-Sutcliffe efficiency over mask-true cells.

    Raises
    ------
    MetricError
        If the valid targets are constant, where NSE is undefined.
    """
    p, t, _ = _valid(pred, target, mask)
    dev = t - t.mean()
    denom = np.dot(dev, dev)
    if denom == 0:
        raise MetricError("NSE undefined: valid targets are constant")
    d = p - t
    return float(1.0 - np.dot(d, d) / denom)


def masked_rmse_loss_backward(pred, target, mask):
    """Gradient of :func:`masked_rmse` w.r.t. ``pred``.

    Returns ``(grad, stationary)``. At zero error the RMSE is not
    differentiable; a zero gradient is returned with ``stationary=True``.
    """
    pred = np.asarray(pred)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    rmse = masked_rmse(pred, target, mask)
    grad = np.zeros(pred.shape, dtype=np.float64)
    if rmse == 0:
        return grad.astype(pred.dtype), True
    n = int(mask.sum())
    diff = pred.astype(np.float64) - np.asarray(target, dtype=np.float64)
    grad[mask] = diff[mask] / (n * rmse)
    return grad.astype(pred.dtype), False


@dataclass
class MetricReport:
    rmse: float
    nse: float
    n_valid: int
    max_abs_error: float

    @classmethod
    def compute(cls, pred, target, mask) -> "MetricReport":
        """Metrics for one image; NSE is NaN when the valid targets are constant."""
        p, t, n = _valid(pred, target, mask)
        try:
            score = nse(pred, target, mask)
        except MetricError:
            score = float("nan")
        return cls(masked_rmse(pred, target, mask), score, n, float(np.abs(p - t).max()))

    def row(self, run_id: str, split: str, strategy: str) -> dict:
        return {
            "run_id": run_id,
            "split": split,
            "strategy": strategy,
            "rmse_m": f"{self.rmse:.6g}",
            "nse": f"{self.nse:.6g}",
            "n_valid": self.n_valid,
            "max_abs_error_m": f"{self.max_abs_error:.6g}",
        }


def pooled_report(preds, targets, masks) -> MetricReport:
    """One report over all valid cells of several images."""
    p = np.concatenate([np.asarray(a)[np.asarray(m, bool)] for a, m in zip(preds, masks)])
    t = np.concatenate([np.asarray(a)[np.asarray(m, bool)] for a, m in zip(targets, masks)])
    return MetricReport.compute(p, t, np.ones(p.shape, bool))


def write_report_csv(path, rows, extra_columns=()) -> None:
    columns = list(extra_columns) + REPORT_COLUMNS
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


def signed_error_map(pred, target, mask, threshold: float = ERROR_MAP_THRESHOLD) -> np.ndarray:
    """Prediction minus truth on valid cells; |error| below ``threshold`` and invalid cells are 0."""
    err = np.where(mask, np.asarray(pred, np.float64) - np.asarray(target, np.float64), 0.0)
    err[np.abs(err) < threshold] = 0.0
    return err


__all__ = [
    "MetricError",
    "MetricReport",
    "masked_rmse",
    "masked_rmse_loss_backward",
    "nse",
    "pooled_report",
    "signed_error_map",
    "write_report_csv",
]
