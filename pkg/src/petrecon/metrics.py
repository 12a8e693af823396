"""Image-quality indices and region-of-interest bookkeeping.

Two peak-signal measures are provided side by side: ``psnr_l2`` divides the
reference peak by the raw l2 norm of the difference (so its value shifts by
10*log10(pixel count) relative to the usual definition), and ``psnr_rmse``
is the conventional RMSE-based figure. Reports carry both, under distinct
names, so numbers are never silently mixed.

All statistics are population statistics computed in float64. SSIM is the
single-window global variant: one mean/variance/covariance triple for the
whole image, with the usual stabilizers c1=(0.01 L)^2 and c2=(0.03 L)^2
where L is the reference maximum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class MetricsError(ValueError):
    """Degenerate inputs: empty ROI, zero range, or non-positive reference."""


def _values(x) -> np.ndarray:
    v = x.values if hasattr(x, "values") else x
    return np.asarray(v, dtype=np.float64)


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    a, b = _values(x), _values(y)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise MetricsError("empty images")
    return a, b


def psnr_l2(x, y) -> float:
    """20*log10(max(y) / ||x - y||_2); +inf when the images are identical."""
    a, b = _pair(x, y)
    peak = float(b.max())
    if peak <= 0:
        raise MetricsError("reference peak must be positive")
    err = float(np.linalg.norm((a - b).ravel()))
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / err)


def psnr_rmse(x, y) -> float:
    """Conventional PSNR: 20*log10(max(y) / RMSE(x, y)); +inf when equal."""
    a, b = _pair(x, y)
    peak = float(b.max())
    if peak <= 0:
        raise MetricsError("reference peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / math.sqrt(mse))


def ssim_global(x, y) -> float:
    """Single-window SSIM over the whole image against reference ``y``."""
    a, b = _pair(x, y)
    peak = float(b.max())
    if peak <= 0:
        raise MetricsError("reference peak must be positive")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mx, my = float(a.mean()), float(b.mean())
    vx = float(((a - mx) ** 2).mean())
    vy = float(((b - my) ** 2).mean())
    cov = float(((a - mx) * (b - my)).mean())
    return ((2 * mx * my + c1) * (2 * cov + c2)) / (
        (mx * mx + my * my + c1) * (vx + vy + c2)
    )


def nrmse(x, y) -> float:
    """RMSE normalized by the reference dynamic range."""
    a, b = _pair(x, y)
    rng = float(b.max() - b.min())
    if rng <= 0:
        raise MetricsError("reference has zero dynamic range")
    return math.sqrt(float(np.mean((a - b) ** 2))) / rng


@dataclass(frozen=True)
class Roi:
    """A named pixel subset given as a boolean mask."""

    label: str
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if not m.any():
            raise MetricsError(f"ROI '{self.label}' is empty")
        object.__setattr__(self, "mask", m)

    @classmethod
    def from_disc(cls, label: str, shape: tuple[int, int], pixel_mm: float,
                  center_mm, radius_mm: float) -> "Roi":
        from .phantom import disc_mask

        return cls(label, disc_mask(shape, pixel_mm, center_mm, radius_mm))


def cr(x, lesion: Roi, reference: Roi) -> float:
    """Contrast recovery: lesion maximum over reference-region mean."""
    a = _values(x)
    ref_mean = float(a[reference.mask].mean())
    if ref_mean <= 0:
        raise MetricsError("reference region mean must be positive")
    return float(a[lesion.mask].max()) / ref_mean


def cov(x, roi: Roi) -> float:
    """Coefficient of variation inside the ROI: population std over mean."""
    a = _values(x)[roi.mask]
    m = float(a.mean())
    if m <= 0:
        raise MetricsError("ROI mean must be positive")
    return float(a.std(ddof=0)) / m


@dataclass
class MetricsReport:
    """One method-vs-reference evaluation, JSON round-trippable.

    ``psnr_l2_db`` uses the raw l2-norm denominator; ``psnr_rmse_db`` is the
    conventional figure. ``cr_by_lesion`` maps lesion labels to contrast
    recovery and ``cov_by_roi`` maps ROI labels to coefficients of variation.
    """

    psnr_l2_db: float
    psnr_rmse_db: float
    ssim: float
    nrmse: float
    cr_by_lesion: dict = field(default_factory=dict)
    cov_by_roi: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "psnr_l2_db": self.psnr_l2_db,
            "psnr_rmse_db": self.psnr_rmse_db,
            "ssim": self.ssim,
            "nrmse": self.nrmse,
            "cr_by_lesion": self.cr_by_lesion,
            "cov_by_roi": self.cov_by_roi,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        # infinities serialize as the JSON-style literal Infinity
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(
            psnr_l2_db=d["psnr_l2_db"],
            psnr_rmse_db=d["psnr_rmse_db"],
            ssim=d["ssim"],
            nrmse=d["nrmse"],
            cr_by_lesion=d.get("cr_by_lesion", {}),
            cov_by_roi=d.get("cov_by_roi", {}),
            meta=d.get("meta", {}),
        )


def report(x, y, lesions: list[Roi] | None = None, reference: Roi | None = None,
           extra_rois: list[Roi] | None = None, meta: dict | None = None) -> MetricsReport:
    """Bundle every index for one image pair; CR needs both a lesion list
    and a reference region."""
    rep = MetricsReport(
        psnr_l2_db=psnr_l2(x, y),
        psnr_rmse_db=psnr_rmse(x, y),
        ssim=ssim_global(x, y),
        nrmse=nrmse(x, y),
        meta=dict(meta or {}),
    )
    if lesions and reference is not None:
        for les in lesions:
            rep.cr_by_lesion[les.label] = cr(x, les, reference)
        rep.cov_by_roi[reference.label] = cov(x, reference)
    for roi in extra_rois or []:
        rep.cov_by_roi[roi.label] = cov(x, roi)
    return rep
