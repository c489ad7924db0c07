"""Evaluation metrics for predicted traction fields.

NRMSE is computed over the per-pixel magnitude vectors; the Pearson
coefficient over the concatenated x,y component vector (2N^2 entries).  The
joint histogram bins (reference, predicted) magnitudes above a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def magnitude_field(f: np.ndarray) -> np.ndarray:
    """Per-pixel resultant magnitude sqrt(fx^2 + fy^2) of a 2xNxN field."""
    f = np.asarray(f)
    if f.ndim != 3 or f.shape[0] != 2:
        raise ValueError(f"expected a 2xNxN field, got shape {f.shape}")
    return np.sqrt(f[0] * f[0] + f[1] * f[1])


def nrmse(pred_mag: np.ndarray, ref_mag: np.ndarray) -> float:
    """||F_pred - F_ref||_2 / ||F_ref||_2 over magnitude vectors."""
    pred = np.asarray(pred_mag, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref_mag, dtype=np.float64).reshape(-1)
    if pred.shape != ref.shape:
        raise ValueError(f"nrmse: length mismatch {pred.shape} vs {ref.shape}")
    ref_norm = np.linalg.norm(ref)
    if ref_norm == 0.0:
        raise ValueError("nrmse: reference magnitude vector has zero norm")
    return float(np.linalg.norm(pred - ref) / ref_norm)


def nrmse_fields(pred: np.ndarray, ref: np.ndarray) -> float:
    return nrmse(magnitude_field(pred), magnitude_field(ref))


def pearson(pred: np.ndarray, ref: np.ndarray) -> float:
    """Pearson correlation over the flattened component vectors."""
    a = np.asarray(pred, dtype=np.float64).reshape(-1)
    b = np.asarray(ref, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"pearson: length mismatch {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    na = np.linalg.norm(da)
    nb = np.linalg.norm(db)
    if na == 0.0 or nb == 0.0:
        raise ValueError("pearson: constant input has zero variance")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


@dataclass
class JointHistogram:
    edges: np.ndarray  # shared bin edges (Pa), strictly increasing
    mass: np.ndarray  # B x B, rows = reference bins, cols = prediction bins
    threshold: float
    empty: bool = False


def joint_histogram(ref_mag: np.ndarray, pred_mag: np.ndarray,
                    threshold: float = 150.0, bins: int = 64) -> JointHistogram:
    """Normalized 2D histogram of (reference, predicted) magnitudes.

    A pixel pair is included when either magnitude reaches the threshold;
    shared edges span [threshold, max over both fields].
    """
    if threshold < 0 or bins < 2:
        raise ValueError(f"need threshold >= 0 and bins >= 2, got {threshold}, {bins}")
    ref = np.asarray(ref_mag, dtype=np.float64).reshape(-1)
    pred = np.asarray(pred_mag, dtype=np.float64).reshape(-1)
    keep = (ref >= threshold) | (pred >= threshold)
    top = max(ref.max(initial=0.0), pred.max(initial=0.0))
    if not np.any(keep):
        edges = np.linspace(threshold, threshold + 1.0, bins + 1)
        return JointHistogram(edges, np.zeros((bins, bins)), threshold, empty=True)
    edges = np.linspace(threshold, max(top, threshold + 1e-9), bins + 1)
    mass, _, _ = np.histogram2d(np.clip(ref[keep], threshold, top),
                                np.clip(pred[keep], threshold, top),
                                bins=(edges, edges))
    return JointHistogram(edges, mass / mass.sum(), threshold)


@dataclass
class MetricReport:
    """Per-sample and aggregate metrics for one evaluation or sweep point."""

    sample_ids: list[str]
    nrmse_values: list[float]
    pearson_values: list[float]
    sweep_value: float | None = None
    failed_samples: list[str] = field(default_factory=list)
    histogram: JointHistogram | None = None

    @property
    def nrmse_mean(self) -> float:
        return float(np.mean(self.nrmse_values))

    @property
    def nrmse_std(self) -> float:
        return float(np.std(self.nrmse_values))

    @property
    def pearson_mean(self) -> float:
        return float(np.mean(self.pearson_values))

    @property
    def pearson_std(self) -> float:
        return float(np.std(self.pearson_values))

    def to_dict(self) -> dict:
        payload = {
            "sweep_value": self.sweep_value,
            "samples": [{"sample_id": sid, "nrmse": nv, "pearson": pv}
                        for sid, nv, pv in zip(self.sample_ids, self.nrmse_values,
                                               self.pearson_values)],
            "failed_samples": self.failed_samples,
            "aggregate": {
                "nrmse_mean": self.nrmse_mean, "nrmse_std": self.nrmse_std,
                "pearson_mean": self.pearson_mean, "pearson_std": self.pearson_std,
            },
        }
        return payload


def reports_to_csv_rows(reports) -> list[list]:
    rows = [["sweep_value", "sample_id", "nrmse", "pearson"]]
    for rep in reports:
        for sid, nv, pv in zip(rep.sample_ids, rep.nrmse_values, rep.pearson_values):
            rows.append([rep.sweep_value if rep.sweep_value is not None else "",
                         sid, repr(nv), repr(pv)])
    return rows
