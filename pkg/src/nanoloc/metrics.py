"""Regression and tracking metrics plus the dataset evaluation harness."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .pose import Pose, wrap_angle
from .vision import ManifestRow

VARIABLES = ("x", "y", "z", "phi")

#: Near/far split threshold on the true distance, meters.
NEAR_FAR_THRESHOLD = 1.1


class DegenerateTruth(ValueError):
    """R^2 is undefined when the truth series has zero variance."""


def _check_series(predictions, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty series")
    return p, t


def r2(predictions, truths) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    p, t = _check_series(predictions, truths)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateTruth("truth series has zero variance; R^2 undefined")
    ss_res = float(np.sum((t - p) ** 2))
    return 1.0 - ss_res / ss_tot


def rmse(predictions, truths) -> float:
    p, t = _check_series(predictions, truths)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(predictions, truths) -> float:
    p, t = _check_series(predictions, truths)
    return float(np.mean(np.abs(p - t)))


def l1_loss(pose_pred: Pose, pose_true: Pose) -> float:
    """Sum of absolute errors over the four pose components; the angular
    component uses the wrapped difference."""
    return (
        abs(pose_pred.x - pose_true.x)
        + abs(pose_pred.y - pose_true.y)
        + abs(pose_pred.z - pose_true.z)
        + abs(wrap_angle(pose_pred.phi - pose_true.phi))
    )


# ---------------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------------

Predictor = Callable[[ManifestRow], Pose | None]


@dataclass(frozen=True)
class VariableMetrics:
    r2: float | None
    rmse: float
    mae: float


@dataclass(frozen=True)
class EvalReport:
    sample_count: int
    failed_count: int
    overall: dict[str, VariableMetrics]
    near: dict[str, VariableMetrics] | None
    far: dict[str, VariableMetrics] | None

    def to_json(self) -> str:
        def block(metrics):
            if metrics is None:
                return None
            return {
                v: {"r2": m.r2, "rmse": m.rmse, "mae": m.mae}
                for v, m in metrics.items()
            }

        doc = {
            "sample_count": self.sample_count,
            "failed_count": self.failed_count,
            "overall": block(self.overall),
            "near": block(self.near),
            "far": block(self.far),
            "mean_r2_xyz": self.mean_r2_xyz,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @property
    def mean_r2_xyz(self) -> float | None:
        vals = [self.overall[v].r2 for v in ("x", "y", "z")]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))


def _metrics_block(pred: np.ndarray, true: np.ndarray) -> dict[str, VariableMetrics]:
    out: dict[str, VariableMetrics] = {}
    for i, var in enumerate(VARIABLES):
        p, t = pred[:, i], true[:, i]
        if var == "phi":
            diff = np.array([wrap_angle(d) for d in p - t])
            p = t + diff  # metrics on the wrapped residual
        try:
            rr = r2(p, t)
        except DegenerateTruth:
            rr = None
        out[var] = VariableMetrics(rr, rmse(p, t), mae(p, t))
    return out


def evaluate(
    rows: list[ManifestRow], predictor: Predictor
) -> tuple[EvalReport, list[tuple]]:
    """Run the predictor over every sample; failures are excluded and counted.

    Returns the report plus scatter rows (variable, truth, prediction, band).
    """
    preds: list[tuple] = []
    trues: list[tuple] = []
    bands: list[str] = []
    failed = 0
    for row in rows:
        est = predictor(row)
        if est is None:
            failed += 1
            continue
        preds.append(est.as_tuple())
        trues.append(row.relative.as_tuple())
        bands.append("near" if row.relative.x < NEAR_FAR_THRESHOLD else "far")
    if not preds:
        raise ValueError("predictor failed on every sample")
    pred = np.asarray(preds)
    true = np.asarray(trues)
    band = np.asarray(bands)

    near_mask = band == "near"
    report = EvalReport(
        sample_count=len(preds),
        failed_count=failed,
        overall=_metrics_block(pred, true),
        near=_metrics_block(pred[near_mask], true[near_mask]) if near_mask.any() else None,
        far=_metrics_block(pred[~near_mask], true[~near_mask]) if (~near_mask).any() else None,
    )
    scatter = []
    for i, var in enumerate(VARIABLES):
        for k in range(len(preds)):
            scatter.append((var, float(true[k, i]), float(pred[k, i]), bands[k]))
    return report, scatter


def scatter_csv(scatter: list[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["variable", "truth", "prediction", "band"])
    for var, t, p, band in scatter:
        writer.writerow([var, repr(t), repr(p), band])
    return buf.getvalue()


def oracle_predictor(row: ManifestRow) -> Pose:
    return row.relative


def mean_predictor(rows: list[ManifestRow]) -> Predictor:
    """The dummy baseline: always answer the dataset mean (R^2 = 0)."""
    arr = np.asarray([r.relative.as_tuple() for r in rows])
    m = arr.mean(axis=0)
    fixed = Pose(float(m[0]), float(m[1]), float(m[2]), float(m[3]))
    return lambda row: fixed
