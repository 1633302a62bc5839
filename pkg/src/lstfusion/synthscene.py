"""Seeded synthetic multi-resolution scenes with a known fine-resolution truth.

A scene is a landcover map plus smooth random fields. Fine LST at the
reference date depends on the class, a texture field and the vegetation
fraction; the target date adds a large-scale drift and a per-class change.
Mid and coarse observations are exact block means of the fine fields.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LSTScaler, Manifest, SampleEntry, SampleTriple, SourceInfo
from .geoio import write_geotiff
from .indices import BandSet, compute_indices
from .raster import GridSpec, Raster, block_average

CLASS_NAMES = ("water", "vegetation", "urban", "bare")
# green, red, nir, swir reflectance of the non-vegetated component per class
BASE_SPECTRA = np.array(
    [
        [0.08, 0.05, 0.02, 0.01],  # water
        [0.14, 0.20, 0.26, 0.32],  # soil under vegetation
        [0.12, 0.14, 0.18, 0.26],  # urban
        [0.14, 0.20, 0.26, 0.32],  # bare
    ]
)
VEG_SPECTRUM = np.array([0.08, 0.04, 0.40, 0.18])
FV_BASE = np.array([0.0, 0.75, 0.1, 0.15])
FV_SPREAD = np.array([0.0, 0.15, 0.08, 0.08])


@dataclass
class SynthConfig:
    seed: int = 0
    size: int = 288
    n_classes: int = 4
    class_offsets: tuple[float, ...] = (-6.0, -3.0, 5.0, 2.0)
    t2_class_shift: tuple[float, ...] = (-1.0, 0.5, 3.0, 2.0)
    base_temp_k: float = 290.0
    texture_amplitude_k: float = 2.0
    correlation_length: float = 10.0
    drift_amplitude_k: float = 3.0
    drift_length: float = 60.0
    vegetation_cooling_k: float = 6.0
    index_noise: float = 0.03
    coarse_factor: int = 12
    fine_pixel_m: float = 10.0
    origin: tuple[float, float] = (500000.0, 5300000.0)
    crs_id: str = "EPSG:32631"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two landcover classes")
        if self.size % 3 or self.size % self.coarse_factor:
            raise ValueError(f"size {self.size} must be divisible by 3 and by the coarse factor {self.coarse_factor}")
        if len(self.class_offsets) != self.n_classes or len(self.t2_class_shift) != self.n_classes:
            raise ValueError("per-class offsets must have one entry per class")
        if self.correlation_length <= 0 or self.drift_length <= 0:
            raise ValueError("correlation lengths must be positive")


@dataclass
class SynthScene:
    sample: SampleTriple
    truth_t1: Raster
    truth_t2: Raster
    landcover: np.ndarray
    fine_bands: Raster
    mid_bands: Raster
    vegetation_fraction: np.ndarray = field(repr=False, default=None)


def smooth_field(rng: np.random.Generator, size: int, length: float) -> np.ndarray:
    """Zero-mean, unit-variance periodic field: white noise low-passed in Fourier space."""
    noise = rng.standard_normal((size, size))
    k = np.fft.fftfreq(size)
    kk = k[:, None] ** 2 + k[None, :] ** 2
    spec = np.fft.fft2(noise) * np.exp(-2 * (np.pi * length) ** 2 * kk / 4)
    f = np.fft.ifft2(spec).real
    f -= f.mean()
    return f / f.std()


def generate_scene(
    cfg: SynthConfig, sample_id: str = "synth", t1: dt.date = dt.date(2020, 6, 1), t2: dt.date = dt.date(2020, 6, 17)
) -> SynthScene:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.size
    cls_fields = np.stack([smooth_field(rng, n, cfg.correlation_length) for _ in range(cfg.n_classes)])
    landcover = cls_fields.argmax(axis=0)
    spec_of = np.arange(cfg.n_classes) % len(CLASS_NAMES)

    fv_noise = smooth_field(rng, n, cfg.correlation_length / 2)
    fv = np.clip(FV_BASE[spec_of][landcover] + FV_SPREAD[spec_of][landcover] * fv_noise, 0.0, 1.0)
    base = BASE_SPECTRA[spec_of][landcover]  # [H, W, 4]
    refl = (1 - fv)[..., None] * base + fv[..., None] * VEG_SPECTRUM
    refl *= 1 + cfg.index_noise * rng.standard_normal(refl.shape)
    refl = np.clip(refl, 1e-3, 1.0).transpose(2, 0, 1)

    offsets = np.asarray(cfg.class_offsets)[landcover]
    texture = cfg.texture_amplitude_k * smooth_field(rng, n, cfg.correlation_length)
    cooling = -cfg.vegetation_cooling_k * (fv - FV_BASE[spec_of][landcover])
    lst_t1 = cfg.base_temp_k + offsets + texture + cooling

    drift = cfg.drift_amplitude_k * smooth_field(rng, n, cfg.drift_length)
    global_shift = rng.uniform(-4.0, 4.0)
    lst_t2 = lst_t1 + drift + np.asarray(cfg.t2_class_shift)[landcover] + global_shift

    fine = GridSpec(n, n, cfg.fine_pixel_m, cfg.origin[0], cfg.origin[1], cfg.crs_id)
    fine_bands = Raster(fine, refl)
    truth_t1 = Raster(fine, lst_t1)
    truth_t2 = Raster(fine, lst_t2)
    mid_bands = block_average(fine_bands, 3)
    fine_idx = compute_indices(BandSet.from_stack("sentinel2", fine_bands, "sentinel2"))
    mid_idx = compute_indices(BandSet.from_stack("landsat8", mid_bands, "landsat8"))
    sample = SampleTriple(
        id=sample_id,
        t1=t1,
        t2=t2,
        t1_indices_fine=fine_idx,
        t1_indices_mid=mid_idx,
        t1_lst_mid=block_average(truth_t1, 3),
        t1_lst_coarse=block_average(truth_t1, cfg.coarse_factor),
        t2_lst_coarse=block_average(truth_t2, cfg.coarse_factor),
        t2_lst_mid=block_average(truth_t2, 3),
        t2_lst_fine_truth=truth_t2,
    )
    return SynthScene(sample, truth_t1, truth_t2, landcover, fine_bands, mid_bands, fv)


def write_dataset(
    out_dir: str | Path, cfg: SynthConfig | None = None, n_train: int = 8, n_test: int = 2
) -> Path:
    """Write GeoTIFFs and a ``manifest.json`` for ``n_train + n_test`` independent scenes."""
    cfg = cfg or SynthConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    start = dt.date(2020, 1, 1)
    for i in range(n_train + n_test):
        sid = f"scene{i:02d}"
        t1 = start + dt.timedelta(days=32 * i)
        t2 = t1 + dt.timedelta(days=16)
        scfg = SynthConfig(**{**cfg.__dict__, "seed": cfg.seed * 1000 + i})
        sc = generate_scene(scfg, sid, t1, t2)
        d = out_dir / sid
        files = {
            "fine_bands_t1": (d / "fine_bands_t1.tif", sc.fine_bands),
            "mid_bands_t1": (d / "mid_bands_t1.tif", sc.mid_bands),
            "mid_lst_t1": (d / "mid_lst_t1.tif", sc.sample.t1_lst_mid),
            "coarse_lst_t1": (d / "coarse_lst_t1.tif", sc.sample.t1_lst_coarse),
            "coarse_lst_t2": (d / "coarse_lst_t2.tif", sc.sample.t2_lst_coarse),
            "mid_lst_t2": (d / "mid_lst_t2.tif", sc.sample.t2_lst_mid),
            "fine_lst_t2_truth": (d / "fine_lst_t2_truth.tif", sc.truth_t2),
        }
        for path, r in files.values():
            write_geotiff(path, r)
        entries.append(
            SampleEntry(
                id=sid,
                t1=t1,
                t2=t2,
                paths={k: p for k, (p, _) in files.items()},
                split="train" if i < n_train else "test",
                acquisition={
                    "t1": {"coarse": "10:30", "mid": "10:41", "fine": "11:05"},
                    "t2": {"coarse": "10:30", "mid": "10:41"},
                },
            )
        )
    scaler = LSTScaler()
    m = Manifest(
        samples=entries,
        sources={
            "coarse": SourceInfo(cfg.fine_pixel_m * cfg.coarse_factor, 1.0, True, "synthetic coarse"),
            "mid": SourceInfo(cfg.fine_pixel_m * 3, 16.0, True, "synthetic mid"),
            "fine": SourceInfo(cfg.fine_pixel_m, 5.0, False, "synthetic fine"),
        },
        lo_k=scaler.lo_k,
        hi_k=scaler.hi_k,
        band_roles={"fine": "sentinel2", "mid": "landsat8"},
    )
    return m.save(out_dir / "manifest.json")
