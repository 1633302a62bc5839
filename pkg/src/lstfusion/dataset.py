"""Manifest loading, constraint / leakage validation, LST scaling and patch extraction."""
from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .geoio import read_archive, read_geotiff, write_archive
from .indices import BandSet, compute_indices
from .raster import GridSpec, Raster, fill_gaps_adaptive, resample_bicubic

log = logging.getLogger(__name__)

DEFAULT_LO_K = 263.15
DEFAULT_HI_K = 323.15
DEFAULT_WINDOW_MIN = 75.0
FINE_CLASS_RANGE_M = (5.0, 15.0)
MID_FACTOR = 3

REQUIRED_PATHS = ("fine_bands_t1", "mid_bands_t1", "mid_lst_t1", "coarse_lst_t1", "coarse_lst_t2")

# Arrays of a PatchSet. The first group lives on the fine grid (encoder
# inputs), the second on the mid grid.
FINE_ARRAYS = ("fine_idx_t1", "mid_idx_t1_up", "mid_lst_t1_up", "coarse_lst_t1_up", "coarse_lst_t2_up")
MID_ARRAYS = ("mid_idx_t1", "mid_lst_t1", "mid_lst_t2")


# --------------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class SourceInfo:
    pixel_size_m: float
    revisit_days: float
    tir: bool
    name: str = ""


TABLE_I_SOURCES = {
    "coarse": SourceInfo(1000.0, 1.0, True, "Terra MODIS"),
    "mid": SourceInfo(30.0, 16.0, True, "Landsat 8"),
    "fine": SourceInfo(10.0, 5.0, False, "Sentinel-2"),
}


@dataclass
class SampleEntry:
    id: str
    t1: dt.date
    t2: dt.date
    paths: dict[str, Path]
    split: str = "train"
    acquisition: dict[str, dict[str, str]] = field(default_factory=dict)


@dataclass
class Manifest:
    samples: list[SampleEntry]
    sources: dict[str, SourceInfo] = field(default_factory=lambda: dict(TABLE_I_SOURCES))
    lo_k: float = DEFAULT_LO_K
    hi_k: float = DEFAULT_HI_K
    band_roles: dict = field(default_factory=lambda: {"fine": "sentinel2", "mid": "landsat8"})
    window_min: float = DEFAULT_WINDOW_MIN
    path: Path | None = None

    def split(self, name: str) -> list[SampleEntry]:
        return [s for s in self.samples if s.split == name]

    def to_dict(self) -> dict:
        base = self.path.parent if self.path else None

        def rel(p: Path) -> str:
            if base is not None:
                try:
                    return str(Path(p).relative_to(base))
                except ValueError:
                    pass
            return str(p)

        return {
            "sources": {
                k: {"name": v.name, "pixel_size_m": v.pixel_size_m, "revisit_days": v.revisit_days, "tir": v.tir}
                for k, v in self.sources.items()
            },
            "normalization": {"lo_k": self.lo_k, "hi_k": self.hi_k},
            "band_roles": self.band_roles,
            "co_acquisition_window_min": self.window_min,
            "samples": [
                {
                    "id": s.id,
                    "t1": s.t1.isoformat(),
                    "t2": s.t2.isoformat(),
                    "split": s.split,
                    "acquisition": s.acquisition,
                    "paths": {k: rel(v) for k, v in s.paths.items()},
                }
                for s in self.samples
            ],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        self.path = path
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def manifest_schema() -> dict:
    text = resources.files("lstfusion").joinpath("manifest.schema.json").read_text()
    return json.loads(text)


def parse_manifest(doc: dict, base_dir: Path | None = None) -> Manifest:
    jsonschema.validate(doc, manifest_schema())
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    samples = []
    for s in doc["samples"]:
        samples.append(
            SampleEntry(
                id=s["id"],
                t1=dt.date.fromisoformat(s["t1"]),
                t2=dt.date.fromisoformat(s["t2"]),
                paths={k: (base_dir / v) for k, v in s["paths"].items()},
                split=s.get("split", "train"),
                acquisition=s.get("acquisition", {}),
            )
        )
    sources = dict(TABLE_I_SOURCES)
    for k, v in doc.get("sources", {}).items():
        sources[k] = SourceInfo(
            float(v["pixel_size_m"]), float(v["revisit_days"]), bool(v["tir"]), v.get("name", "")
        )
    norm = doc.get("normalization", {})
    return Manifest(
        samples=samples,
        sources=sources,
        lo_k=float(norm.get("lo_k", DEFAULT_LO_K)),
        hi_k=float(norm.get("hi_k", DEFAULT_HI_K)),
        band_roles=doc.get("band_roles", {"fine": "sentinel2", "mid": "landsat8"}),
        window_min=float(doc.get("co_acquisition_window_min", DEFAULT_WINDOW_MIN)),
    )


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    m = parse_manifest(json.loads(path.read_text()), path.parent)
    m.path = path
    return m


# --------------------------------------------------------------------------- validation


@dataclass
class Report:
    title: str
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return f"{self.title}: OK"
        lines = [f"{self.title}: {len(self.violations)} violation(s)"]
        lines += [f"  - {v}" for v in self.violations]
        return "\n".join(lines)


def _minutes(hhmm: str) -> int:
    h, m = hhmm.split(":")
    return int(h) * 60 + int(m)


def validate_constraints(m: Manifest, check_files: bool = True, check_rasters: bool = False) -> Report:
    """Check the resolution / revisit / thermal-band conditions and per-sample sanity."""
    rep = Report("constraints")
    src = m.sources
    missing = [k for k in ("coarse", "mid", "fine") if k not in src]
    if missing:
        rep.violations.append(f"sources missing role(s): {', '.join(missing)}")
        return rep
    c, mi, f = src["coarse"], src["mid"], src["fine"]
    if not c.pixel_size_m > mi.pixel_size_m > f.pixel_size_m:
        rep.violations.append(
            "spatial resolution ordering coarse > mid > fine violated "
            f"({c.pixel_size_m} / {mi.pixel_size_m} / {f.pixel_size_m} m)"
        )
    if not c.revisit_days < mi.revisit_days:
        rep.violations.append(
            f"coarse source must revisit more often than mid ({c.revisit_days} vs {mi.revisit_days} days)"
        )
    lo, hi = FINE_CLASS_RANGE_M
    if not lo <= f.pixel_size_m < hi:
        rep.violations.append(f"fine source must be 10 m-class, got {f.pixel_size_m} m")
    if c.revisit_days != 1:
        rep.violations.append(f"coarse source must be daily, got {c.revisit_days} days")
    if not c.tir:
        rep.violations.append("coarse source lacks thermal infrared bands")
    if not mi.tir:
        rep.violations.append("mid source lacks thermal infrared bands")

    for s in m.samples:
        if not s.t1 < s.t2:
            rep.violations.append(f"{s.id}: reference date {s.t1} is not before target date {s.t2}")
        times = s.acquisition.get("t1", {})
        if len(times) >= 2:
            mins = [_minutes(t) for t in times.values()]
            spread = max(mins) - min(mins)
            if spread > m.window_min:
                rep.violations.append(
                    f"{s.id}: t1 acquisitions span {spread} min, above the {m.window_min:g} min window"
                )
        for key in REQUIRED_PATHS:
            if key not in s.paths:
                rep.violations.append(f"{s.id}: missing path {key!r}")
        if check_files:
            for key, p in s.paths.items():
                if not Path(p).exists():
                    rep.violations.append(f"{s.id}: file for {key!r} not found: {p}")
        if check_rasters and rep.ok:
            fine = read_geotiff(s.paths["fine_bands_t1"]).grid
            mid = read_geotiff(s.paths["mid_lst_t1"]).grid
            coarse = read_geotiff(s.paths["coarse_lst_t2"]).grid
            if not np.isclose(fine.pixel_size * MID_FACTOR, mid.pixel_size, rtol=1e-6):
                rep.violations.append(
                    f"{s.id}: mid pixel {mid.pixel_size} m is not 3x the fine pixel {fine.pixel_size} m"
                )
            if not coarse.pixel_size > mid.pixel_size:
                rep.violations.append(f"{s.id}: coarse raster is not coarser than the mid raster")
    return rep


def check_leakage(m: Manifest) -> Report:
    """Flag training samples whose reference date equals another training sample's target date."""
    rep = Report("temporal leakage")
    train = m.split("train")
    for a in train:
        for b in train:
            if a is not b and a.t1 == b.t2:
                rep.violations.append(f"{a.id} reference date {a.t1} equals {b.id} target date")
    return rep


# --------------------------------------------------------------------------- scaling


@dataclass
class LSTScaler:
    """Affine map of [lo_k, hi_k] Kelvin onto [-1, 1]."""

    lo_k: float = DEFAULT_LO_K
    hi_k: float = DEFAULT_HI_K
    n_clamped: int = 0

    def __post_init__(self):
        if not self.lo_k < self.hi_k:
            raise ValueError(f"normalisation range needs lo < hi, got {self.lo_k}, {self.hi_k}")

    def normalize_array(self, kelvin: np.ndarray) -> np.ndarray:
        z = 2.0 * (np.asarray(kelvin, dtype=np.float64) - self.lo_k) / (self.hi_k - self.lo_k) - 1.0
        out = np.clip(z, -1.0, 1.0)
        n = int(np.count_nonzero(out != z))
        if n:
            self.n_clamped += n
            log.warning("clamped %d LST value(s) outside [%.2f, %.2f] K", n, self.lo_k, self.hi_k)
        return out

    def denormalize_array(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) + 1.0) * 0.5 * (self.hi_k - self.lo_k) + self.lo_k

    def normalize(self, r: Raster) -> Raster:
        v = np.where(r.mask, r.values, self.lo_k)
        return r.with_values(self.normalize_array(v), r.mask)

    def denormalize(self, r: Raster) -> Raster:
        v = np.where(r.mask, r.values, 0.0)
        return r.with_values(self.denormalize_array(v), r.mask)


def normalize_lst(r: Raster, lo: float = DEFAULT_LO_K, hi: float = DEFAULT_HI_K) -> Raster:
    return LSTScaler(lo, hi).normalize(r)


def denormalize_lst(r: Raster, lo: float = DEFAULT_LO_K, hi: float = DEFAULT_HI_K) -> Raster:
    return LSTScaler(lo, hi).denormalize(r)


# --------------------------------------------------------------------------- samples


@dataclass(frozen=True)
class SampleTriple:
    id: str
    t1: dt.date
    t2: dt.date
    t1_indices_fine: Raster
    t1_indices_mid: Raster
    t1_lst_mid: Raster
    t1_lst_coarse: Raster
    t2_lst_coarse: Raster
    t2_lst_mid: Raster | None = None
    t2_lst_fine_truth: Raster | None = None

    def __post_init__(self):
        if not self.t1 < self.t2:
            raise ValueError(f"{self.id}: t1 {self.t1} must precede t2 {self.t2}")
        fg, mg = self.t1_indices_fine.grid, self.t1_indices_mid.grid
        if not np.isclose(fg.pixel_size * MID_FACTOR, mg.pixel_size, rtol=1e-6):
            raise ValueError(f"{self.id}: mid pixel size must be 3x the fine pixel size")
        if mg.shape != (fg.height // MID_FACTOR, fg.width // MID_FACTOR) or fg.height % 3 or fg.width % 3:
            raise ValueError(f"{self.id}: fine grid {fg.shape} and mid grid {mg.shape} do not nest")
        if not self.t1_lst_mid.grid.same_frame(mg):
            raise ValueError(f"{self.id}: mid LST and mid indices are on different grids")
        if self.t2_lst_mid is not None and not self.t2_lst_mid.grid.same_frame(mg):
            raise ValueError(f"{self.id}: target mid LST is on a different grid")

    @property
    def fine_grid(self) -> GridSpec:
        return self.t1_indices_fine.grid

    @property
    def mid_grid(self) -> GridSpec:
        return self.t1_indices_mid.grid

    def rasters(self) -> dict[str, Raster]:
        out = {
            "t1_indices_fine": self.t1_indices_fine,
            "t1_indices_mid": self.t1_indices_mid,
            "t1_lst_mid": self.t1_lst_mid,
            "t1_lst_coarse": self.t1_lst_coarse,
            "t2_lst_coarse": self.t2_lst_coarse,
        }
        if self.t2_lst_mid is not None:
            out["t2_lst_mid"] = self.t2_lst_mid
        if self.t2_lst_fine_truth is not None:
            out["t2_lst_fine_truth"] = self.t2_lst_fine_truth
        return out


def _crop_to_grid(r: Raster, grid: GridSpec) -> Raster:
    """Cut the window of ``r`` that coincides with ``grid`` (same pixel size, aligned)."""
    g = r.grid
    col = (grid.origin_x - g.origin_x) / g.pixel_size
    row = (g.origin_y - grid.origin_y) / g.pixel_size
    if not (np.isclose(col, round(col), atol=1e-6) and np.isclose(row, round(row), atol=1e-6)):
        raise ValueError("rasters are not pixel-aligned")
    col, row = int(round(col)), int(round(row))
    if col < 0 or row < 0 or row + grid.height > g.height or col + grid.width > g.width:
        raise ValueError("raster does not cover the common fine/mid extent")
    return r.crop(row, col, grid.height, grid.width)


def load_sample(m: Manifest, entry: SampleEntry) -> SampleTriple:
    """Read one manifest entry, gap-fill, derive indices, crop to a 3x-nested frame."""
    p = entry.paths
    for key in REQUIRED_PATHS:
        if key not in p:
            raise ValueError(f"{entry.id}: manifest entry lacks {key!r}")
    fine_bands = fill_gaps_adaptive(read_geotiff(p["fine_bands_t1"]))
    mid_bands = fill_gaps_adaptive(read_geotiff(p["mid_bands_t1"]))
    fine_idx = fill_gaps_adaptive(
        compute_indices(BandSet.from_stack("fine", fine_bands, m.band_roles.get("fine", "sentinel2")))
    )
    mid_idx = fill_gaps_adaptive(
        compute_indices(BandSet.from_stack("mid", mid_bands, m.band_roles.get("mid", "landsat8")))
    )
    mid_lst = fill_gaps_adaptive(read_geotiff(p["mid_lst_t1"]))
    coarse_t1 = fill_gaps_adaptive(read_geotiff(p["coarse_lst_t1"]))
    coarse_t2 = fill_gaps_adaptive(read_geotiff(p["coarse_lst_t2"]))
    mid_t2 = fill_gaps_adaptive(read_geotiff(p["mid_lst_t2"])) if "mid_lst_t2" in p else None
    truth = read_geotiff(p["fine_lst_t2_truth"]) if "fine_lst_t2_truth" in p else None

    fg, mg = fine_idx.grid, mid_idx.grid
    if not np.isclose(fg.pixel_size * MID_FACTOR, mg.pixel_size, rtol=1e-6):
        raise ValueError(f"{entry.id}: mid pixel {mg.pixel_size} m is not 3x fine pixel {fg.pixel_size} m")
    # Largest fine window (multiple of 3) starting at the common upper-left
    # corner that the mid rasters also cover.
    h = min(fg.height // 3, mg.height) * 3
    w = min(fg.width // 3, mg.width) * 3
    fine_grid = fg.window(0, 0, h, w)
    mid_grid = fine_grid.coarsen(MID_FACTOR)
    return SampleTriple(
        id=entry.id,
        t1=entry.t1,
        t2=entry.t2,
        t1_indices_fine=_crop_to_grid(fine_idx, fine_grid),
        t1_indices_mid=_crop_to_grid(mid_idx, mid_grid),
        t1_lst_mid=_crop_to_grid(mid_lst, mid_grid),
        t1_lst_coarse=coarse_t1,
        t2_lst_coarse=coarse_t2,
        t2_lst_mid=_crop_to_grid(mid_t2, mid_grid) if mid_t2 is not None else None,
        t2_lst_fine_truth=_crop_to_grid(truth, fine_grid) if truth is not None else None,
    )


def scene_arrays(s: SampleTriple, scaler: LSTScaler) -> dict[str, np.ndarray]:
    """Full-scene model inputs: fine-grid encoder inputs plus mid-grid references, LST normalised."""
    fg, mg = s.fine_grid, s.mid_grid
    out = {
        "fine_idx_t1": s.t1_indices_fine.values,
        "mid_idx_t1_up": resample_bicubic(s.t1_indices_mid, fg).values.clip(-1.0, 1.0),
        "mid_lst_t1_up": scaler.normalize(resample_bicubic(s.t1_lst_mid, fg)).values,
        "coarse_lst_t1_up": scaler.normalize(resample_bicubic(s.t1_lst_coarse, fg)).values,
        "coarse_lst_t2_up": scaler.normalize(resample_bicubic(s.t2_lst_coarse, fg)).values,
        "mid_idx_t1": s.t1_indices_mid.values,
        "mid_lst_t1": scaler.normalize(s.t1_lst_mid).values,
    }
    if s.t2_lst_mid is not None:
        out["mid_lst_t2"] = scaler.normalize(s.t2_lst_mid).values
    assert all(out[k].shape[1:] == fg.shape for k in FINE_ARRAYS)
    assert all(out[k].shape[1:] == mg.shape for k in MID_ARRAYS if k in out)
    return out


# --------------------------------------------------------------------------- patches


@dataclass
class PatchSet:
    """Aligned fine (``fine_size``) and mid (``fine_size / 3``) patches.

    ``provenance`` rows are ``(sample_index, fine_row, fine_col)``, with the
    sample index pointing into ``sample_ids``.
    """

    arrays: dict[str, np.ndarray]
    provenance: np.ndarray
    sample_ids: list[str]
    fine_size: int = 96
    fine_stride: int = 24
    lo_k: float = DEFAULT_LO_K
    hi_k: float = DEFAULT_HI_K

    def __len__(self) -> int:
        return int(self.provenance.shape[0])

    @property
    def mid_size(self) -> int:
        return self.fine_size // MID_FACTOR

    @property
    def has_target(self) -> bool:
        return "mid_lst_t2" in self.arrays

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx)
        return PatchSet(
            {k: np.asarray(v[idx]) for k, v in self.arrays.items()},
            self.provenance[idx],
            self.sample_ids,
            self.fine_size,
            self.fine_stride,
            self.lo_k,
            self.hi_k,
        )

    @staticmethod
    def concat(sets: list["PatchSet"]) -> "PatchSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        ids: list[str] = []
        provs = []
        for ps in sets:
            prov = ps.provenance.copy()
            prov[:, 0] += len(ids)
            ids += ps.sample_ids
            provs.append(prov)
        keys = set.intersection(*(set(ps.arrays) for ps in sets))
        first = sets[0]
        return PatchSet(
            {k: np.concatenate([ps.arrays[k] for ps in sets]) for k in sorted(keys)},
            np.concatenate(provs),
            ids,
            first.fine_size,
            first.fine_stride,
            first.lo_k,
            first.hi_k,
        )

    def save(self, directory: str | Path) -> Path:
        arrays = dict(self.arrays)
        arrays["provenance"] = self.provenance.astype(np.float32)
        meta = {
            "sample_ids": self.sample_ids,
            "fine_size": self.fine_size,
            "fine_stride": self.fine_stride,
            "mid_size": self.mid_size,
            "mid_stride": self.fine_stride // MID_FACTOR,
            "normalization": {"lo_k": self.lo_k, "hi_k": self.hi_k},
        }
        return write_archive(directory, arrays, meta)

    @classmethod
    def load(cls, directory: str | Path, mmap: bool = True) -> "PatchSet":
        arrays, meta = read_archive(directory, mmap=mmap)
        prov = np.asarray(arrays.pop("provenance")).astype(np.int64)
        return cls(
            arrays,
            prov,
            list(meta["sample_ids"]),
            int(meta["fine_size"]),
            int(meta["fine_stride"]),
            float(meta["normalization"]["lo_k"]),
            float(meta["normalization"]["hi_k"]),
        )


def window_starts(length: int, size: int, stride: int) -> list[int]:
    if length < size:
        raise ValueError(f"raster side {length} is smaller than the patch size {size}")
    return list(range(0, length - size + 1, stride))


def extract_patches(
    s: SampleTriple,
    scaler: LSTScaler | None = None,
    fine_size: int = 96,
    fine_stride: int = 24,
) -> PatchSet:
    """Sliding-window patches; mid patches are cut at the co-located footprint."""
    if fine_size % MID_FACTOR or fine_stride % MID_FACTOR:
        raise ValueError("patch size and stride must be multiples of 3")
    scaler = scaler or LSTScaler()
    scene = scene_arrays(s, scaler)
    h, w = s.fine_grid.shape
    rows = window_starts(h, fine_size, fine_stride)
    cols = window_starts(w, fine_size, fine_stride)
    ms = fine_size // MID_FACTOR
    arrays = {k: [] for k in scene}
    prov = []
    for r in rows:
        for c in cols:
            for k, v in scene.items():
                if k in FINE_ARRAYS:
                    arrays[k].append(v[:, r : r + fine_size, c : c + fine_size])
                else:
                    mr, mc = r // MID_FACTOR, c // MID_FACTOR
                    arrays[k].append(v[:, mr : mr + ms, mc : mc + ms])
            prov.append((0, r, c))
    return PatchSet(
        {k: np.stack(v).astype(np.float32) for k, v in arrays.items()},
        np.asarray(prov, dtype=np.int64),
        [s.id],
        fine_size,
        fine_stride,
        scaler.lo_k,
        scaler.hi_k,
    )


def reassemble(patches: np.ndarray, provenance: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Average overlapping patches back onto a ``shape`` canvas (single-sample provenance)."""
    c, ph, pw = patches.shape[1:]
    acc = np.zeros((c, *shape))
    cnt = np.zeros(shape)
    for p, (_, r, col) in zip(patches, provenance):
        acc[:, r : r + ph, col : col + pw] += p
        cnt[r : r + ph, col : col + pw] += 1
    with np.errstate(invalid="ignore"):
        return acc / cnt


def build_patchset(m: Manifest, split: str = "train", fine_size: int = 96, fine_stride: int = 24) -> PatchSet:
    scaler = LSTScaler(m.lo_k, m.hi_k)
    sets = []
    for entry in m.split(split):
        s = load_sample(m, entry)
        if s.t2_lst_mid is None:
            raise ValueError(f"{entry.id}: training samples need a target mid LST (mid_lst_t2)")
        sets.append(extract_patches(s, scaler, fine_size, fine_stride))
    if not sets:
        raise ValueError(f"manifest has no {split!r} samples")
    if scaler.n_clamped:
        log.warning("%d LST values clamped to the normalisation range", scaler.n_clamped)
    return PatchSet.concat(sets)
