"""Spatial cell registry, geohash decoding and great-circle distance."""

import math
from collections.abc import Iterator, Mapping
from pathlib import Path
from types import MappingProxyType

import pandas as pd

from odflow.errors import GeohashError, SchemaError

EARTH_RADIUS_KM = 6371.0088

GEOHASH_BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_GEOHASH_INDEX = {c: i for i, c in enumerate(GEOHASH_BASE32)}

Coord = tuple[float, float]


def geohash_bounds(code: str) -> tuple[float, float, float, float]:
    """Return (lat_min, lat_max, lon_min, lon_max) of a geohash cell."""
    if not code:
        raise GeohashError("geohash must be a non-empty string")
    if len(code) > 12:
        raise GeohashError(f"geohash {code!r} is longer than 12 characters")

    lat_min, lat_max = -90.0, 90.0
    lon_min, lon_max = -180.0, 180.0
    is_lon = True
    for pos, char in enumerate(code):
        idx = _GEOHASH_INDEX.get(char)
        if idx is None:
            raise GeohashError(f"invalid geohash character {char!r} at position {pos}")
        for bit in range(5):
            if is_lon:
                mid = (lon_min + lon_max) / 2
                if idx & (1 << (4 - bit)):
                    lon_min = mid
                else:
                    lon_max = mid
            else:
                mid = (lat_min + lat_max) / 2
                if idx & (1 << (4 - bit)):
                    lat_min = mid
                else:
                    lat_max = mid
            is_lon = not is_lon
    return lat_min, lat_max, lon_min, lon_max


def decode_geohash(code: str) -> Coord:
    """Decode a geohash into the centroid (lat, lon) of its cell."""
    lat_min, lat_max, lon_min, lon_max = geohash_bounds(code)
    return (lat_min + lat_max) / 2, (lon_min + lon_max) / 2


def haversine_km(a: Coord, b: Coord) -> float:
    """Great-circle distance in km on a sphere of mean Earth radius."""
    lat1, lon1 = a
    lat2, lon2 = b
    # Order the endpoints so that the result is bit-identical under swapping.
    if (lat2, lon2) < (lat1, lon1):
        lat1, lon1, lat2, lon2 = lat2, lon2, lat1, lon1
    phi1 = math.radians(lat1)
    phi2 = math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def _check_coord(cell_id: str, lat: float, lon: float) -> None:
    if not cell_id:
        raise SchemaError("cell id must be non-empty")
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise SchemaError(f"cell {cell_id!r} has out-of-range coordinates ({lat}, {lon})")


class CellTable(Mapping[str, Coord]):
    """Immutable registry of cell centroids keyed by CellId."""

    def __init__(self, entries: Mapping[str, Coord]):
        checked = {}
        for cell_id, (lat, lon) in entries.items():
            _check_coord(cell_id, float(lat), float(lon))
            checked[cell_id] = (float(lat), float(lon))
        self._entries = MappingProxyType(checked)

    def __getitem__(self, cell_id: str) -> Coord:
        try:
            return self._entries[cell_id]
        except KeyError:
            raise SchemaError(f"unknown cell {cell_id!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, cell_id: object) -> bool:
        return cell_id in self._entries

    def distance_km(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        return haversine_km(self[a], self[b])

    def require(self, cell_ids) -> None:
        """Raise SchemaError naming the first cell id not in the table."""
        for cell_id in cell_ids:
            if cell_id not in self._entries:
                raise SchemaError(f"cell {cell_id!r} is not in the cells manifest")

    @classmethod
    def from_geohashes(cls, codes) -> "CellTable":
        return cls({code: decode_geohash(code) for code in codes})


def load_cells(path: str | Path) -> CellTable:
    """Load a `cell_id,lat,lon` manifest."""
    df = pd.read_csv(path, dtype={"cell_id": str}, keep_default_na=False, encoding="utf-8")
    missing = {"cell_id", "lat", "lon"} - set(df.columns)
    if missing:
        raise SchemaError(f"cells manifest {path} is missing column(s): {', '.join(sorted(missing))}")
    if df["cell_id"].duplicated().any():
        dup = df.loc[df["cell_id"].duplicated(), "cell_id"].iloc[0]
        raise SchemaError(f"cells manifest {path} lists cell {dup!r} more than once")
    return CellTable(
        {row.cell_id: (float(row.lat), float(row.lon)) for row in df.itertuples(index=False)}
    )


def write_cells(cells: CellTable, path: str | Path) -> None:
    df = pd.DataFrame(
        [(cell_id, lat, lon) for cell_id, (lat, lon) in sorted(cells.items())],
        columns=["cell_id", "lat", "lon"],
    )
    df.to_csv(path, index=False)
