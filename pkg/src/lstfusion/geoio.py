"""GeoTIFF read/write and the flat patch-archive format.

GeoTIFFs are written with tifffile: float32, band-separate planar layout,
georeferencing through the ModelPixelScale / ModelTiepoint / GeoKeyDirectory
tags and nodata through the GDAL_NODATA tag, which is all GDAL needs to read
them back.

A patch archive is a directory holding ``header.json`` plus one raw
little-endian float32 blob per named array (``<name>.f32``).
"""
from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np
import tifffile

from .raster import NODATA, GridSpec, Raster

TAG_PIXEL_SCALE = 33550
TAG_TIEPOINT = 33922
TAG_GEOKEYS = 34735
TAG_GDAL_NODATA = 42113

_GEOKEY_MODEL_TYPE = 1024
_GEOKEY_RASTER_TYPE = 1025
_GEOKEY_GEOGRAPHIC_TYPE = 2048
_GEOKEY_PROJECTED_TYPE = 3072


def _epsg_code(crs_id: str) -> int:
    m = re.fullmatch(r"(?i)epsg:(\d+)", crs_id.strip())
    if not m:
        raise ValueError(f"only EPSG:<code> CRS identifiers are supported, got {crs_id!r}")
    return int(m.group(1))


def _geokeys(crs_id: str) -> tuple[int, ...]:
    code = _epsg_code(crs_id)
    if code == 4326:
        model, key = 2, _GEOKEY_GEOGRAPHIC_TYPE
    else:
        model, key = 1, _GEOKEY_PROJECTED_TYPE
    keys = [
        (_GEOKEY_MODEL_TYPE, 0, 1, model),
        (_GEOKEY_RASTER_TYPE, 0, 1, 1),  # PixelIsArea
        (key, 0, 1, code),
    ]
    header = (1, 1, 0, len(keys))
    return tuple(header) + tuple(v for k in keys for v in k)


def write_geotiff(path: str | os.PathLike, r: Raster, nodata: float = NODATA) -> None:
    g = r.grid
    data = np.where(r.mask, r.values, nodata).astype("<f4")
    extratags = [
        (TAG_PIXEL_SCALE, "d", 3, (g.pixel_size, g.pixel_size, 0.0), True),
        (TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, g.origin_x, g.origin_y, 0.0), True),
        (TAG_GEOKEYS, "H", len(_geokeys(g.crs_id)), _geokeys(g.crs_id), True),
        (TAG_GDAL_NODATA, "s", 0, repr(float(nodata)), True),
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    single = data.shape[0] == 1
    tifffile.imwrite(
        path,
        data[0] if single else data,
        photometric="minisblack",
        planarconfig=None if single else "separate",
        extratags=extratags,
        metadata=None,
        software=False,
        byteorder="<",
    )


def read_geotiff(path: str | os.PathLike) -> Raster:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster not found: {path}")
    with tifffile.TiffFile(path) as tif:
        page = tif.pages[0]
        tags = page.tags
        data = tif.asarray().astype(np.float64)
        if data.ndim == 2:
            data = data[None]
        elif page.planarconfig != tifffile.PLANARCONFIG.SEPARATE and data.ndim == 3:
            data = np.moveaxis(data, -1, 0)
        if TAG_PIXEL_SCALE not in tags or TAG_TIEPOINT not in tags:
            raise ValueError(f"{path} carries no georeferencing tags")
        scale = tags[TAG_PIXEL_SCALE].value
        tie = tags[TAG_TIEPOINT].value
        if not np.isclose(scale[0], scale[1]):
            raise ValueError(f"{path}: non-square pixels {scale[:2]} are not supported")
        crs = "EPSG:32631"
        if TAG_GEOKEYS in tags:
            keys = tags[TAG_GEOKEYS].value
            for i in range(4, len(keys), 4):
                if keys[i] in (_GEOKEY_PROJECTED_TYPE, _GEOKEY_GEOGRAPHIC_TYPE):
                    crs = f"EPSG:{keys[i + 3]}"
        nodata = None
        if TAG_GDAL_NODATA in tags:
            nodata = float(str(tags[TAG_GDAL_NODATA].value).strip("\x00 "))
    px = float(scale[0])
    grid = GridSpec(
        width=data.shape[2],
        height=data.shape[1],
        pixel_size=px,
        origin_x=float(tie[3]) - float(tie[0]) * px,
        origin_y=float(tie[4]) + float(tie[1]) * px,
        crs_id=crs,
    )
    mask = np.isfinite(data)
    if nodata is not None:
        if np.isnan(nodata):
            mask &= ~np.isnan(data)
        else:
            mask &= data != np.float32(nodata)
    return Raster(grid, data, mask)


def grid_to_dict(g: GridSpec) -> dict:
    return {
        "width": g.width,
        "height": g.height,
        "pixel_size": g.pixel_size,
        "origin_x": g.origin_x,
        "origin_y": g.origin_y,
        "crs_id": g.crs_id,
    }


def grid_from_dict(d: dict) -> GridSpec:
    return GridSpec(**d)


def write_archive(
    directory: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        if not re.fullmatch(r"[A-Za-z0-9_.-]+", name):
            raise ValueError(f"invalid array name {name!r}")
        a = np.ascontiguousarray(arr, dtype="<f4")
        a.tofile(directory / f"{name}.f32")
        entries[name] = {"shape": list(a.shape), "dtype": "float32", "byteorder": "little"}
    header = {"format": "f32-archive/1", "arrays": entries, "meta": meta or {}}
    (directory / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return directory


def read_archive(directory: str | os.PathLike, mmap: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    header_path = directory / "header.json"
    if not header_path.exists():
        raise FileNotFoundError(f"no archive header at {header_path}")
    header = json.loads(header_path.read_text())
    arrays = {}
    for name, info in header["arrays"].items():
        shape = tuple(info["shape"])
        path = directory / f"{name}.f32"
        if mmap and int(np.prod(shape)) > 0:
            arrays[name] = np.memmap(path, dtype="<f4", mode="r", shape=shape)
        else:
            arrays[name] = np.fromfile(path, dtype="<f4").reshape(shape)
    return arrays, header.get("meta", {})
