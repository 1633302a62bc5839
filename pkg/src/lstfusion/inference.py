"""Scene-scale prediction by overlapping tiles, and the bicubic baseline."""
from __future__ import annotations

import numpy as np
import torch

from .dataset import FINE_ARRAYS, LSTScaler, SampleTriple, scene_arrays
from .generator import INPUT_KEYS, Generator
from .raster import Raster, resample_bicubic


def tile_starts(length: int, size: int, stride: int) -> list[int]:
    if length < size:
        raise ValueError(f"scene side {length} is smaller than the tile size {size}")
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] != length - size:
        starts.append(length - size)
    return starts


def blend_window(size: int) -> np.ndarray:
    """Separable tent weights, highest in the tile centre and positive at its edges."""
    ramp = np.minimum(np.arange(size) + 1, size - np.arange(size)).astype(np.float64)
    ramp /= ramp.max()
    return np.outer(ramp, ramp)


@torch.no_grad()
def predict_normalized(
    G: Generator, scene: dict[str, np.ndarray], tile: int | None = None, stride: int = 48, batch_size: int = 8
) -> np.ndarray:
    """Blend tiled generator outputs over a fine-grid scene -> [H, W] normalised LST."""
    G.eval()
    tile = tile or G.cfg.base_size
    h, w = scene[FINE_ARRAYS[0]].shape[-2:]
    coords = [(r, c) for r in tile_starts(h, tile, stride) for c in tile_starts(w, tile, stride)]
    weight = blend_window(tile)
    acc = np.zeros((h, w))
    norm = np.zeros((h, w))
    dtype = next(G.parameters()).dtype
    for i in range(0, len(coords), batch_size):
        chunk = coords[i : i + batch_size]
        inputs = {
            k: torch.from_numpy(
                np.stack([scene[k][:, r : r + tile, c : c + tile] for r, c in chunk]).astype(np.float64)
            ).to(dtype)
            for k in INPUT_KEYS
        }
        out = G(inputs)[:, 0].double().numpy()
        for (r, c), o in zip(chunk, out):
            acc[r : r + tile, c : c + tile] += weight * o
            norm[r : r + tile, c : c + tile] += weight
    return acc / norm


def infer_scene(
    G: Generator, sample: SampleTriple, scaler: LSTScaler, stride: int = 48, batch_size: int = 8
) -> Raster:
    """Fine-grid LST in Kelvin for one sample."""
    scene = scene_arrays(sample, scaler)
    z = predict_normalized(G, scene, stride=stride, batch_size=batch_size)
    return Raster(sample.fine_grid, scaler.denormalize_array(z)[None])


def bicubic_baseline(sample: SampleTriple) -> Raster:
    """Target-date coarse LST upsampled to the fine grid."""
    return resample_bicubic(sample.t2_lst_coarse, sample.fine_grid)
