"""NDVI / NDBI / NDWI from surface-reflectance band stacks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import Raster, stack

ROLES = ("green", "red", "nir", "swir")
INDEX_NAMES = ("NDVI", "NDBI", "NDWI")

# Band codes per role, and 1-based positions of those bands inside a
# stack file that holds exactly the listed codes in ascending order.
SENSOR_BANDS = {
    "landsat8": {"green": "B3", "red": "B4", "nir": "B5", "swir": "B6"},
    "sentinel2": {"green": "B3", "red": "B4", "nir": "B8", "swir": "B11"},
}
SENSOR_PRESETS = {
    "landsat8": {"green": 1, "red": 2, "nir": 3, "swir": 4},
    "sentinel2": {"green": 1, "red": 2, "nir": 3, "swir": 4},
}


def resolve_roles(spec) -> dict[str, int]:
    """Role -> 1-based band position, from a preset name or an explicit mapping."""
    if isinstance(spec, str):
        try:
            return dict(SENSOR_PRESETS[spec])
        except KeyError:
            raise ValueError(
                f"unknown sensor preset {spec!r}; known: {sorted(SENSOR_PRESETS)}"
            ) from None
    roles = {k: int(v) for k, v in dict(spec).items()}
    missing = [r for r in ROLES if r not in roles]
    if missing:
        raise ValueError(f"band role mapping lacks role(s): {', '.join(missing)}")
    return roles


@dataclass(frozen=True)
class BandSet:
    sensor: str
    bands: dict[str, Raster]

    @classmethod
    def from_stack(cls, sensor: str, r: Raster, roles) -> "BandSet":
        roles = resolve_roles(roles)
        out = {}
        for role, pos in roles.items():
            if not 1 <= pos <= r.bands:
                raise ValueError(f"role {role!r} points at band {pos}, stack has {r.bands}")
            out[role] = r.band(pos - 1)
        return cls(sensor, out)


def normalized_difference(a: Raster, b: Raster) -> Raster:
    if not a.grid.same_frame(b.grid) or a.bands != b.bands:
        raise ValueError("normalized_difference needs rasters on the same grid")
    num = a.values - b.values
    den = a.values + b.values
    mask = a.mask & b.mask & (den != 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        nd = np.where(mask, num / np.where(den == 0, 1.0, den), 0.0)
    return Raster(a.grid, np.clip(nd, -1.0, 1.0), mask)


def compute_indices(bs: BandSet) -> Raster:
    """Three-band raster in the order NDVI, NDBI, NDWI."""
    for role in ROLES:
        if role not in bs.bands:
            raise ValueError(f"band set for {bs.sensor} is missing the {role!r} band")
    b = bs.bands
    return stack(
        [
            normalized_difference(b["nir"], b["red"]),
            normalized_difference(b["swir"], b["nir"]),
            normalized_difference(b["green"], b["nir"]),
        ]
    )
