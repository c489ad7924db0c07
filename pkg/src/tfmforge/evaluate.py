"""Generalization harnesses: spatial-scale resampling and noise injection.

Both perturb the dimensionless displacement input at inference time only;
predictions are always scored against the unperturbed reference traction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import MetricReport, magnitude_field, nrmse, pearson
from .rng import RngStream

DEFAULT_SCALE_GRID = (0.25, 0.5, 0.75, 1.0, 1.33, 1.67, 2.3)
DEFAULT_NOISE_GRID = (0.0, 0.03, 0.06, 0.09)


@dataclass(frozen=True)
class ScaleSpec:
    """Field-of-view ratio s = inference side length / training side length."""

    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale ratio must be positive, got {self.scale}")


@dataclass(frozen=True)
class NoiseSpec:
    """Noise level as a fraction of the training-set mean field variance."""

    level: float
    reference_variance: float

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"noise level must be >= 0, got {self.level}")
        if self.reference_variance < 0:
            raise ValueError("reference variance must be >= 0")

    @property
    def variance(self) -> float:
        return self.level * self.reference_variance


def _bilinear_resize(img: np.ndarray, out_size: int) -> np.ndarray:
    """Resize a square image with bilinear interpolation (pixel-center mapping)."""
    n = img.shape[-1]
    if n == out_size:
        return img.copy()
    coords = (np.arange(out_size) + 0.5) * (n / out_size) - 0.5
    coords = np.clip(coords, 0.0, n - 1.0)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    w = coords - lo
    rows = img[..., lo, :] * (1.0 - w)[:, None] + img[..., hi, :] * w[:, None]
    out = rows[..., :, lo] * (1.0 - w) + rows[..., :, hi] * w
    return out


def rescale_displacement(u: np.ndarray, spec: ScaleSpec) -> np.ndarray:
    """Zoom-in (center crop) or zoom-out (zero pad), then resample to N x N.

    Vector values are resampled geometrically; magnitudes are not rescaled.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3 or u.shape[0] != 2:
        raise ValueError(f"expected a 2xNxN displacement, got shape {u.shape}")
    n = u.shape[-1]
    s = spec.scale
    if s == 1.0:
        return u.copy()
    m = int(round(s * n))
    if s < 1.0:
        if m < 4:
            raise ValueError(f"crop side {m} too small for scale ratio {s}")
        off = (n - m) // 2
        cropped = u[:, off:off + m, off:off + m]
        return _bilinear_resize(cropped, n)
    pad_lo = (m - n) // 2
    pad_hi = m - n - pad_lo
    padded = np.pad(u, ((0, 0), (pad_lo, pad_hi), (pad_lo, pad_hi)))
    return _bilinear_resize(padded, n)


def add_noise(u: np.ndarray, spec: NoiseSpec, rng: RngStream) -> np.ndarray:
    """Add i.i.d. Gaussian noise of variance level * reference variance."""
    if spec.level == 0.0:
        return u
    u = np.asarray(u)
    return u + rng.normal(u.shape, 0.0, np.sqrt(spec.variance))


def evaluate_model(model, u, f_ref, cell_types=None, sample_ids=None,
                   sweep_value=None, perturb=None) -> MetricReport:
    """Score a model on a stack of samples; metric failures flag the sample.

    ``perturb`` maps (u_sample, sample_index) to the perturbed input.
    ``f_ref`` and predictions are compared in the same (physical) units.
    """
    ids = list(sample_ids) if sample_ids is not None else [f"i{k}" for k in range(len(u))]
    report = MetricReport(sample_ids=[], nrmse_values=[], pearson_values=[],
                          sweep_value=sweep_value)
    for k in range(len(u)):
        uk = perturb(u[k], k) if perturb is not None else u[k]
        ct = cell_types[k:k + 1] if cell_types is not None else None
        pred = model.predict(uk, cell_type=ct) if model.vocab is not None \
            else model.predict(uk)
        try:
            nv = nrmse(magnitude_field(pred), magnitude_field(f_ref[k]))
            pv = pearson(pred, f_ref[k])
        except ValueError:
            report.failed_samples.append(ids[k])
            continue
        report.sample_ids.append(ids[k])
        report.nrmse_values.append(nv)
        report.pearson_values.append(pv)
    return report


def run_sweep(model, u, f_ref, axis: str, values, cell_types=None,
              sample_ids=None, manifest_variance: float | None = None,
              seed: int = 0) -> list[MetricReport]:
    """Evaluate over a grid of scale ratios or noise levels.

    ``axis`` is "scale" or "noise"; noise sweeps need the training-set mean
    dimensionless field variance from the dataset manifest.
    """
    if axis not in ("scale", "noise"):
        raise ValueError(f"sweep axis must be 'scale' or 'noise', got {axis!r}")
    if axis == "noise" and manifest_variance is None:
        raise ValueError("noise sweep needs the manifest mean field variance")
    reports = []
    for value in values:
        if axis == "scale":
            spec = ScaleSpec(float(value))
            perturb = lambda uk, k: rescale_displacement(uk, spec)
        else:
            spec = NoiseSpec(float(value), manifest_variance)
            stream = RngStream(seed, f"noise-sweep/{value}")
            perturb = lambda uk, k: add_noise(uk, spec, stream.child(f"sample/{k}"))
        reports.append(evaluate_model(model, u, f_ref, cell_types, sample_ids,
                                      sweep_value=float(value), perturb=perturb))
    return reports
