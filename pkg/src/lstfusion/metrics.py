"""Image-quality, error and correlation metrics.

Evaluation works in degrees Celsius: fine predictions are pooled 3x3 onto the
mid grid and compared with the mid-resolution reference.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .raster import Raster, block_average

KELVIN_OFFSET = 273.15
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WIN = 11
SSIM_SIGMA = 1.5
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_MIN_SIDE = 8
METRIC_NAMES = ("rmse", "ssim", "psnr", "sam", "cc", "ergas")


# --------------------------------------------------------------------------- SSIM family (torch)


def effective_window(side: int, win_size: int = SSIM_WIN) -> int:
    """Largest odd window <= ``win_size`` that fits in ``side`` pixels."""
    w = min(win_size, side)
    return w if w % 2 else w - 1


def gaussian_window_1d(size: int, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur_valid(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    n = win.numel()
    x = F.conv2d(x, win.view(1, 1, 1, n))
    return F.conv2d(x, win.view(1, 1, n, 1))


def ssim_components(x: torch.Tensor, y: torch.Tensor, data_range, win_size: int = SSIM_WIN):
    """Mean SSIM and mean contrast-structure term per image.

    ``x``, ``y``: ``[N, 1, H, W]``. ``data_range`` is a scalar or ``[N]`` tensor.
    Gaussian filtering is 'valid'; the window shrinks on images narrower than it.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    ws = effective_window(min(x.shape[-2:]), win_size)
    win = gaussian_window_1d(ws, dtype=x.dtype).to(x.device)
    dr = torch.as_tensor(data_range, dtype=x.dtype, device=x.device).reshape(-1, 1, 1, 1)
    c1 = (SSIM_K1 * dr) ** 2
    c2 = (SSIM_K2 * dr) ** 2
    mx, my = _blur_valid(x, win), _blur_valid(y, win)
    sxx = _blur_valid(x * x, win) - mx**2
    syy = _blur_valid(y * y, win) - my**2
    sxy = _blur_valid(x * y, win) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
    return (lum * cs).mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def ms_ssim_scales(side: int, max_scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    m = 1
    while m < max_scales and side // 2**m >= MS_SSIM_MIN_SIDE:
        m += 1
    return m


def ms_ssim_torch(x: torch.Tensor, y: torch.Tensor, data_range, clamp: float = 1e-6) -> torch.Tensor:
    """Multi-scale SSIM per image.

    As many of the five standard scales as keep the coarsest side >= 8 pixels
    are used, with the weight vector truncated and renormalised. Per-scale
    terms are clamped at ``clamp`` before exponentiation.
    """
    m = ms_ssim_scales(min(x.shape[-2:]))
    w = torch.tensor(MS_SSIM_WEIGHTS[:m], dtype=x.dtype, device=x.device)
    w = w / w.sum()
    out = torch.ones(x.shape[0], dtype=x.dtype, device=x.device)
    for i in range(m):
        s, cs = ssim_components(x, y, data_range)
        if i < m - 1:
            out = out * cs.clamp_min(clamp) ** w[i]
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
        else:
            out = out * s.clamp_min(clamp) ** w[i]
    return out


def _as_image(a) -> np.ndarray:
    if isinstance(a, Raster):
        if not a.fully_valid:
            raise ValueError("metrics need fully valid rasters")
        a = a.values
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError("metrics are defined on single-band images")
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {a.shape}")
    return a


def _ref_range(ref: np.ndarray) -> float:
    r = float(ref.max() - ref.min())
    return r if r > 0 else 1.0


def ssim(pred, ref, data_range: float | None = None) -> float:
    p, r = _as_image(pred), _as_image(ref)
    dr = _ref_range(r) if data_range is None else data_range
    s, _ = ssim_components(torch.from_numpy(p)[None, None], torch.from_numpy(r)[None, None], dr)
    return float(s[0])


def ms_ssim(pred, ref, data_range: float | None = None) -> float:
    p, r = _as_image(pred), _as_image(ref)
    dr = _ref_range(r) if data_range is None else data_range
    return float(ms_ssim_torch(torch.from_numpy(p)[None, None], torch.from_numpy(r)[None, None], dr)[0])


# --------------------------------------------------------------------------- scalar metrics


def rmse(pred, ref) -> float:
    p, r = _as_image(pred), _as_image(ref)
    if p.shape != r.shape:
        raise ValueError("pred and ref must share a shape")
    return float(np.sqrt(np.mean((p - r) ** 2)))


def psnr(pred, ref) -> float:
    e = rmse(pred, ref)
    if e == 0:
        return math.inf
    return float(20 * np.log10(_ref_range(_as_image(ref)) / e))


def ergas(pred, ref, ratio: float = 1 / 3) -> float:
    r = _as_image(ref)
    mu = float(r.mean())
    if mu == 0:
        raise ValueError("ERGAS is undefined for a zero-mean reference")
    return float(100 * ratio * math.sqrt((rmse(pred, ref) / mu) ** 2))


def sam(pred, ref) -> float:
    """Angle in degrees between the two images taken as flat vectors."""
    p, r = _as_image(pred).ravel(), _as_image(ref).ravel()
    n = np.linalg.norm(p) * np.linalg.norm(r)
    if n == 0:
        raise ValueError("SAM is undefined for an all-zero image")
    return float(np.degrees(np.arccos(np.clip(np.dot(p, r) / n, -1.0, 1.0))))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("series lengths differ")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.mean(da**2)), np.sqrt(np.mean(db**2))
    if sa == 0 or sb == 0:
        raise ValueError("correlation is undefined for a constant series")
    return float(np.clip(np.mean(da * db) / (sa * sb), -1.0, 1.0))


def cc(pred, ref) -> float:
    return pearson(_as_image(pred), _as_image(ref))


def error_metrics(pred, ref, ratio: float = 1 / 3) -> dict[str, float]:
    return {"rmse": rmse(pred, ref), "psnr": psnr(pred, ref), "ergas": ergas(pred, ref, ratio)}


def similarity_metrics(pred, ref) -> dict[str, float]:
    return {"ssim": ssim(pred, ref), "ms_ssim": ms_ssim(pred, ref), "sam": sam(pred, ref), "cc": cc(pred, ref)}


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the mean of the positions they occupy."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    m = a.size
    if m != b.size:
        raise ValueError("series lengths differ")
    if m < 3:
        raise ValueError("need at least three pairs")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValueError("correlation is undefined for a constant series")
    d = midranks(a) - midranks(b)
    return float(1 - 6 * np.sum(d**2) / (m * (m**2 - 1)))


# --------------------------------------------------------------------------- in-situ series


@dataclass
class SensorSeries:
    sensor_id: str
    lat: float
    lon: float
    timestamps: list[dt.datetime] = field(default_factory=list)
    t_a: list[float] = field(default_factory=list)
    lst: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not len(self.timestamps) == len(self.t_a) == len(self.lst):
            raise ValueError(f"{self.sensor_id}: series are not time-aligned")


def rank_correlations(series: SensorSeries) -> dict[str, float]:
    if len(series.t_a) < 3:
        raise ValueError(f"{series.sensor_id}: need at least three paired observations")
    return {"pcc": pearson(series.lst, series.t_a), "srcc": spearman(series.lst, series.t_a)}


def read_sensor_csv(path: str | Path) -> dict[str, list[tuple[float, float, dt.datetime, float]]]:
    """``sensor_id, lat, lon, timestamp_iso8601, t_a_celsius`` -> readings per sensor."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sensor CSV not found: {path}")
    out: dict[str, list] = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh, skipinitialspace=True):
            out.setdefault(row["sensor_id"], []).append(
                (
                    float(row["lat"]),
                    float(row["lon"]),
                    dt.datetime.fromisoformat(row["timestamp_iso8601"]),
                    float(row["t_a_celsius"]),
                )
            )
    return out


# --------------------------------------------------------------------------- reports


def evaluate_against_reference(pred_fine: Raster, ref_mid: Raster, ratio: float = 1 / 3) -> dict[str, float]:
    """Pool the fine prediction 3x3, convert both to Celsius and compute the six metrics."""
    factor = round(ref_mid.grid.pixel_size / pred_fine.grid.pixel_size)
    pooled = block_average(pred_fine, factor) if factor > 1 else pred_fine
    if pooled.grid.shape != ref_mid.grid.shape:
        raise ValueError(f"pooled prediction {pooled.grid.shape} does not match reference {ref_mid.grid.shape}")
    p = _as_image(pooled) - KELVIN_OFFSET
    r = _as_image(ref_mid) - KELVIN_OFFSET
    out = error_metrics(p, r, ratio)
    sim = similarity_metrics(p, r)
    out.update({k: sim[k] for k in ("ssim", "sam", "cc")})
    return {k: out[k] for k in METRIC_NAMES}


@dataclass
class MetricsReport:
    """``rows[date][method] -> {metric: value}``."""

    rows: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    meta: dict = field(
        default_factory=lambda: {
            "units": "degC",
            "pooling": "3x3 block mean of fine prediction onto the mid grid",
            "psnr_range": "max - min of the reference",
            "sam": "angle between flattened images, degrees",
            "ergas_ratio": "fine/mid pixel size (1/3)",
        }
    )

    def add(self, date: str, method: str, metrics: dict[str, float]) -> None:
        self.rows.setdefault(date, {})[method] = dict(metrics)

    @property
    def methods(self) -> list[str]:
        seen: list[str] = []
        for per in self.rows.values():
            for m in per:
                if m not in seen:
                    seen.append(m)
        return seen

    def averages(self) -> dict[str, dict[str, float]]:
        out = {}
        for method in self.methods:
            vals = [per[method] for per in self.rows.values() if method in per]
            keys = vals[0].keys()
            out[method] = {k: float(np.mean([v[k] for v in vals])) for k in keys}
        return out

    def to_dict(self) -> dict:
        return {"meta": self.meta, "dates": self.rows, "average": self.averages()}

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def table(self) -> str:
        methods = self.methods
        blocks = list(self.rows.items()) + [("Average", self.averages())]
        lines = []
        for label, per in blocks:
            lines.append(f"{label}")
            lines.append(f"{'Metric':<8}" + "".join(f"{m:>14}" for m in methods))
            keys = next(iter(per.values())).keys()
            for k in keys:
                cells = "".join(
                    f"{per[m][k]:>14.3f}" if m in per else f"{'-':>14}" for m in methods
                )
                lines.append(f"{k.upper():<8}" + cells)
            lines.append("")
        return "\n".join(lines)
