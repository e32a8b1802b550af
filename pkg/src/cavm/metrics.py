"""Region-restricted SSIM / PSNR and tumor-vs-healthy reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

INFINITE = math.inf


def _region(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"region mask shape {mask.shape} != image shape {shape}")
    return mask


def psnr(a: np.ndarray, b: np.ndarray, region_mask=None, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE) over the region; ``math.inf`` for an exact match."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("psnr: data_range must be positive")
    region = _region(region_mask, a.shape)
    if not region.any():
        raise ValueError("psnr: empty region")
    mse = float(np.mean((a[region] - b[region]) ** 2))
    if mse == 0.0:
        return INFINITE
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 7, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM for every fully-contained window, uniform weights, population moments.

    Entry (i, j) belongs to the window centred at (i + window//2, j + window//2).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"ssim: image {a.shape} smaller than window {window}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, region_mask=None, window: int = 7, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over windows whose centre pixel lies in the region."""
    a = np.asarray(a, dtype=np.float64)
    smap = ssim_map(a, b, window, data_range, k1, k2)
    region = _region(region_mask, a.shape)
    half = window // 2
    centres = region[half:half + smap.shape[0], half:half + smap.shape[1]]
    if not centres.any():
        raise ValueError("ssim: region has no pixel with a full window around it")
    return float(smap[centres].mean())


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return yy * yy + xx * xx <= radius * radius


def split_regions(tumor_mask: np.ndarray, target: np.ndarray, dilation: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """(tumor, healthy): dilated tumor mask within the brain, and brain minus tumor.

    The brain is every pixel where the target is positive.
    """
    brain = np.asarray(target) > 0
    tumor = np.asarray(tumor_mask) > 0.5
    if dilation > 0:
        tumor = ndimage.binary_dilation(tumor, structure=_disk(dilation))
    tumor &= brain
    return tumor, brain & ~tumor


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if np.isinf(arr).any():
        finite = bool(np.isinf(arr).all())
        return INFINITE, 0.0 if finite else float("nan")
    return float(arr.mean()), float(arr.std())


@dataclass
class RegionStats:
    ssim_mean: float
    ssim_std: float
    psnr_mean: float
    psnr_std: float


@dataclass
class RegionReport:
    """SSIM in percent and PSNR in dB, mean and std across samples, per region."""

    tumor: RegionStats
    healthy: RegionStats
    count: int
    per_sample: dict[str, list[float]] = field(default_factory=dict, repr=False)

    def records(self, method: str = "model") -> list[dict]:
        return [
            {"method": method, "region": name, "n": self.count, **_jsonable(vars(stats))}
            for name, stats in (("tumor", self.tumor), ("healthy", self.healthy))
        ]

    def to_json(self, method: str = "model", **extra) -> str:
        return "\n".join(json.dumps({**r, **extra}, sort_keys=True) for r in self.records(method))


def _jsonable(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else ("inf" if v == INFINITE else v)) for k, v in d.items()}


def evaluate(
    preds: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    tumor_masks: Sequence[np.ndarray],
    dilation: int = 2,
    window: int = 7,
) -> RegionReport:
    if not (len(preds) == len(targets) == len(tumor_masks)):
        raise ValueError(f"evaluate: {len(preds)} predictions, {len(targets)} targets, {len(tumor_masks)} masks")
    if not preds:
        raise ValueError("evaluate: empty sample set")
    values: dict[str, list[float]] = {k: [] for k in ("tumor_ssim", "tumor_psnr", "healthy_ssim", "healthy_psnr")}
    for pred, target, mask in zip(preds, targets, tumor_masks):
        pred = np.asarray(pred, dtype=np.float64).reshape(np.shape(target))
        target = np.asarray(target, dtype=np.float64)
        data_range = float(target.max())
        tumor, healthy = split_regions(mask, target, dilation)
        for name, region in (("tumor", tumor), ("healthy", healthy)):
            values[f"{name}_ssim"].append(100.0 * ssim(pred, target, region, window, data_range))
            values[f"{name}_psnr"].append(psnr(pred, target, region, data_range))

    def stats(name: str) -> RegionStats:
        return RegionStats(*_mean_std(values[f"{name}_ssim"]), *_mean_std(values[f"{name}_psnr"]))

    return RegionReport(stats("tumor"), stats("healthy"), len(preds), values)


def _fmt(mean: float, std: float, digits: int = 2) -> str:
    if mean == INFINITE:
        return "inf"
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def render_table(reports: dict[str, RegionReport]) -> str:
    """Aligned text table: one row per method, SSIM (%) and PSNR (dB) per region."""
    header = ["Method", "Tumor SSIM (%)", "Tumor PSNR (dB)", "Healthy SSIM (%)", "Healthy PSNR (dB)"]
    rows = [header]
    for method, r in reports.items():
        rows.append(
            [
                method,
                _fmt(r.tumor.ssim_mean, r.tumor.ssim_std),
                _fmt(r.tumor.psnr_mean, r.tumor.psnr_std),
                _fmt(r.healthy.ssim_mean, r.healthy.ssim_std),
                _fmt(r.healthy.psnr_mean, r.healthy.psnr_std),
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
