"""Grid-aware rasters and the resampling / filtering primitives shared by the pipeline.

Grids are north-up: ``origin_x``/``origin_y`` give the upper-left corner in a
projected CRS, rows run southwards. Pixel ``(row, col)`` has its centre at
``(origin_x + (col + 0.5) * pixel_size, origin_y - (row + 0.5) * pixel_size)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

NODATA = -9999.0


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    pixel_size: float
    origin_x: float = 0.0
    origin_y: float = 0.0
    crs_id: str = "EPSG:32631"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(left, bottom, right, top)"""
        return (
            self.origin_x,
            self.origin_y - self.height * self.pixel_size,
            self.origin_x + self.width * self.pixel_size,
            self.origin_y,
        )

    def coarsen(self, factor: int) -> "GridSpec":
        return replace(
            self,
            width=self.width // factor,
            height=self.height // factor,
            pixel_size=self.pixel_size * factor,
        )

    def refine(self, factor: int) -> "GridSpec":
        return replace(
            self,
            width=self.width * factor,
            height=self.height * factor,
            pixel_size=self.pixel_size / factor,
        )

    def window(self, row: int, col: int, height: int, width: int) -> "GridSpec":
        return replace(
            self,
            width=width,
            height=height,
            origin_x=self.origin_x + col * self.pixel_size,
            origin_y=self.origin_y - row * self.pixel_size,
        )

    def same_frame(self, other: "GridSpec", tol: float = 1e-6) -> bool:
        return (
            self.shape == other.shape
            and self.crs_id == other.crs_id
            and math.isclose(self.pixel_size, other.pixel_size, rel_tol=tol)
            and abs(self.origin_x - other.origin_x) <= tol * self.pixel_size
            and abs(self.origin_y - other.origin_y) <= tol * self.pixel_size
        )


@dataclass(frozen=True, eq=False)
class Raster:
    """Multi-band float raster with a validity mask.

    ``values`` has shape ``[bands, height, width]``; ``mask`` is True where a
    pixel is valid. Invalid pixels hold :data:`NODATA`. Arrays are made
    read-only on construction.
    """

    grid: GridSpec
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3 or values.shape[1:] != self.grid.shape:
            raise ValueError(
                f"values shape {values.shape} does not match grid {self.grid.shape}"
            )
        if self.mask is None:
            mask = np.isfinite(values)
        else:
            mask = np.broadcast_to(np.asarray(self.mask, dtype=bool), values.shape).copy()
            mask &= np.isfinite(values)
        values = np.where(mask, values, NODATA)
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def fully_valid(self) -> bool:
        return bool(self.mask.all())

    def band(self, i: int) -> "Raster":
        return Raster(self.grid, self.values[i : i + 1], self.mask[i : i + 1])

    def with_values(self, values: np.ndarray, mask: np.ndarray | None = None) -> "Raster":
        return Raster(self.grid, values, mask)

    def crop(self, row: int, col: int, height: int, width: int) -> "Raster":
        sl = (slice(None), slice(row, row + height), slice(col, col + width))
        return Raster(self.grid.window(row, col, height, width), self.values[sl], self.mask[sl])

    def masked_array(self) -> np.ma.MaskedArray:
        return np.ma.MaskedArray(self.values, mask=~self.mask)


def stack(rasters: list[Raster]) -> Raster:
    grid = rasters[0].grid
    for r in rasters[1:]:
        if not r.grid.same_frame(grid):
            raise ValueError("cannot stack rasters on different grids")
    return Raster(
        grid,
        np.concatenate([r.values for r in rasters]),
        np.concatenate([r.mask for r in rasters]),
    )


def _require_valid(r: Raster, op: str):
    if not r.fully_valid:
        raise ValueError(f"{op} requires a fully valid raster; gap-fill it first")


def block_average(r: Raster, factor: int) -> Raster:
    """Mean over non-overlapping ``factor x factor`` blocks."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    _require_valid(r, "block_average")
    h, w = r.grid.shape
    if h % factor or w % factor:
        raise ValueError(f"raster {h}x{w} is not divisible by factor {factor}")
    v = r.values.reshape(r.bands, h // factor, factor, w // factor, factor)
    return Raster(r.grid.coarsen(factor), v.mean(axis=(2, 4)))


def _keys_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Cubic convolution weights for taps at offsets -1, 0, 1, 2 from floor(x)."""
    d = np.stack([t + 1.0, t, 1.0 - t, 2.0 - t], axis=-1)
    ad = np.abs(d)
    near = (a + 2) * ad**3 - (a + 3) * ad**2 + 1
    far = a * ad**3 - 5 * a * ad**2 + 8 * a * ad - 4 * a
    return np.where(ad <= 1, near, np.where(ad < 2, far, 0.0))


def _cubic_matrix(src_pos: np.ndarray, n_src: int) -> np.ndarray:
    """Dense [n_dst, n_src] interpolation matrix with edge-clamped taps."""
    base = np.floor(src_pos).astype(np.int64)
    wts = _keys_weights(src_pos - base)
    m = np.zeros((src_pos.size, n_src))
    rows = np.arange(src_pos.size)
    for k, off in enumerate((-1, 0, 1, 2)):
        idx = np.clip(base + off, 0, n_src - 1)
        np.add.at(m, (rows, idx), wts[:, k])
    return m


def resample_bicubic(r: Raster, target: GridSpec) -> Raster:
    """Keys (a = -0.5) cubic convolution onto ``target``; borders clamp to the edge pixels."""
    _require_valid(r, "resample_bicubic")
    src = r.grid
    if src.crs_id != target.crs_id:
        raise ValueError(f"CRS mismatch: {src.crs_id} vs {target.crs_id}")
    sl, sb, sr, st = src.bounds
    tl, tb, tr, tt = target.bounds
    if tl >= sr or tr <= sl or tb >= st or tt <= sb:
        raise ValueError("target grid does not overlap the source raster extent")

    xs = target.origin_x + (np.arange(target.width) + 0.5) * target.pixel_size
    ys = target.origin_y - (np.arange(target.height) + 0.5) * target.pixel_size
    col_pos = (xs - src.origin_x) / src.pixel_size - 0.5
    row_pos = (src.origin_y - ys) / src.pixel_size - 0.5
    mx = _cubic_matrix(col_pos, src.width)
    my = _cubic_matrix(row_pos, src.height)
    out = my @ r.values @ mx.T
    return Raster(target, out)


def fill_gaps_adaptive(r: Raster) -> Raster:
    """Fill each masked pixel with the mean of valid pixels in the smallest
    centred odd window (3, 5, 7, ...) that contains at least one of them.

    Only originally valid pixels feed the means, so the fill does not depend
    on the order in which gaps are visited.
    """
    values = r.values.copy()
    mask = r.mask
    for b in range(r.bands):
        valid = mask[b]
        if valid.all():
            continue
        if not valid.any():
            raise ValueError(f"band {b} has no valid pixels to fill from")
        v = np.where(valid, r.values[b], 0.0)
        h, w = valid.shape
        # summed-area tables for O(1) window sums at any radius
        s_val = np.pad(v, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
        s_cnt = np.pad(valid.astype(np.float64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
        rows, cols = np.nonzero(~valid)
        out = np.empty(rows.size)
        todo = np.arange(rows.size)
        radius = 1
        while todo.size:
            rr, cc = rows[todo], cols[todo]
            r0 = np.clip(rr - radius, 0, h)
            r1 = np.clip(rr + radius + 1, 0, h)
            c0 = np.clip(cc - radius, 0, w)
            c1 = np.clip(cc + radius + 1, 0, w)
            cnt = s_cnt[r1, c1] - s_cnt[r0, c1] - s_cnt[r1, c0] + s_cnt[r0, c0]
            tot = s_val[r1, c1] - s_val[r0, c1] - s_val[r1, c0] + s_val[r0, c0]
            done = cnt > 0.5
            out[todo[done]] = tot[done] / cnt[done]
            todo = todo[~done]
            radius += 1
        values[b, rows, cols] = out
    return Raster(r.grid, values, np.ones_like(mask))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Square kernel of side ``2 * ceil(3 sigma) + 1``, normalised to unit sum."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    half = int(math.ceil(3 * sigma))
    ax = np.arange(-half, half + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    k = np.exp(-(xx**2 + yy**2) / (2 * sigma**2)) / (2 * math.pi * sigma**2)
    return k / k.sum()


def gaussian_smooth(x, sigma: float = 1.0):
    """Depthwise Gaussian blur with reflective padding.

    Accepts a torch tensor (``[..., C, H, W]``, differentiable) or a numpy
    array of the same layout; returns the same type and shape.
    """
    kernel = gaussian_kernel(sigma)
    side = kernel.shape[0]
    is_numpy = isinstance(x, np.ndarray)
    t = torch.from_numpy(np.asarray(x, dtype=np.float64)) if is_numpy else x
    if t.shape[-1] < side or t.shape[-2] < side:
        raise ValueError(
            f"input {tuple(t.shape[-2:])} is smaller than the {side}x{side} kernel"
        )
    lead = t.shape[:-2]
    t4 = t.reshape(-1, 1, *t.shape[-2:])
    k = torch.as_tensor(kernel, dtype=t.dtype, device=t.device)[None, None]
    pad = side // 2
    out = F.conv2d(F.pad(t4, (pad, pad, pad, pad), mode="reflect"), k)
    out = out.reshape(*lead, *t.shape[-2:])
    return out.numpy() if is_numpy else out
