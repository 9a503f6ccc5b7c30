"""H3 cell-index codec and point indexing.

Cell ids are plain Python ints laid out per the H3 cell-index standard::

    bit 63      reserved (0)
    bits 59-62  mode (1 = cell)
    bits 56-58  mode-dependent reserved (0 for cells)
    bits 52-55  resolution
    bits 45-51  base cell (0-121)
    bits 0-44   fifteen 3-bit digits; digit 1 is the most significant

The codec (parse, format, validate, parent) is pure bit manipulation. Mapping
a lat/lng to the containing cell needs the icosahedral projection and base
cell tables, which are delegated to the ``h3`` package.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import h3
import numpy as np

MAX_RES = 15
NUM_BASE_CELLS = 122
CELL_MODE = 1
EARTH_RADIUS_KM = 6371.0
FEATURE_RESOLUTIONS = (6, 7, 8, 9)

_MODE_OFFSET = 59
_RESERVED_OFFSET = 56
_RES_OFFSET = 52
_BASE_CELL_OFFSET = 45
_DIGIT_BITS = 3
_DIGIT_MASK = 0b111
_INVALID_DIGIT = 7
_ALL_DIGITS_UNUSED = (1 << 45) - 1


class SpatialIndexError(ValueError):
    """Raised for invalid coordinates, resolutions or cell ids."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lng: float

    def __post_init__(self):
        check_point(self.lat, self.lng)


@dataclass(frozen=True)
class LocationFeatures:
    """City name plus the cells containing a point at resolutions 6 through 9."""

    city: str
    cell6: int
    cell7: int
    cell8: int
    cell9: int

    def cell(self, res: int) -> int:
        return getattr(self, f"cell{res}")


def check_point(lat: float, lng: float) -> None:
    if not (math.isfinite(lat) and math.isfinite(lng)):
        raise SpatialIndexError(f"non-finite coordinate ({lat}, {lng})")
    if not -90.0 <= lat <= 90.0:
        raise SpatialIndexError(f"latitude {lat} outside [-90, 90]")
    if not -180.0 <= lng <= 180.0:
        raise SpatialIndexError(f"longitude {lng} outside [-180, 180]")


def _check_res(res: int) -> None:
    if not isinstance(res, int) or not 0 <= res <= MAX_RES:
        raise SpatialIndexError(f"resolution {res!r} outside [0, {MAX_RES}]")


def _digit_offset(pos: int) -> int:
    return (MAX_RES - pos) * _DIGIT_BITS


def get_mode(cell: int) -> int:
    return (cell >> _MODE_OFFSET) & 0b1111


def cell_resolution(cell: int) -> int:
    return (cell >> _RES_OFFSET) & 0b1111


def get_base_cell(cell: int) -> int:
    return (cell >> _BASE_CELL_OFFSET) & 0b1111111


def get_digit(cell: int, pos: int) -> int:
    """Digit at 1-based position ``pos`` (1 = coarsest)."""
    return (cell >> _digit_offset(pos)) & _DIGIT_MASK


def set_digit(cell: int, pos: int, digit: int) -> int:
    off = _digit_offset(pos)
    return (cell & ~(_DIGIT_MASK << off)) | ((digit & _DIGIT_MASK) << off)


def make_cell(res: int, base_cell: int, digits: list[int] | tuple[int, ...]) -> int:
    """Assemble a cell id from its components; ``digits`` has ``res`` entries."""
    _check_res(res)
    if len(digits) != res:
        raise SpatialIndexError(f"expected {res} digits, got {len(digits)}")
    cell = (CELL_MODE << _MODE_OFFSET) | (res << _RES_OFFSET)
    cell |= (base_cell & 0b1111111) << _BASE_CELL_OFFSET
    cell |= _ALL_DIGITS_UNUSED
    for pos, d in enumerate(digits, start=1):
        cell = set_digit(cell, pos, d)
    return cell


def validate_cell(cell: int) -> bool:
    if not isinstance(cell, int) or cell < 0 or cell >> 64:
        return False
    if cell >> 63:
        return False
    if get_mode(cell) != CELL_MODE:
        return False
    if (cell >> _RESERVED_OFFSET) & 0b111:
        return False
    if get_base_cell(cell) >= NUM_BASE_CELLS:
        return False
    res = cell_resolution(cell)
    for pos in range(1, MAX_RES + 1):
        d = get_digit(cell, pos)
        if pos <= res:
            if d == _INVALID_DIGIT:
                return False
        elif d != _INVALID_DIGIT:
            return False
    return True


def parse_cell(text: str) -> int:
    """Hex string to cell id; raises on anything that is not a valid cell."""
    try:
        cell = int(text, 16)
    except (TypeError, ValueError):
        raise SpatialIndexError(f"not a hex cell id: {text!r}") from None
    if not validate_cell(cell):
        raise SpatialIndexError(f"invalid cell id: {text!r}")
    return cell


def format_cell(cell: int) -> str:
    return format(cell, "x")


def cell_to_parent(cell: int, parent_res: int) -> int:
    res = cell_resolution(cell)
    _check_res(parent_res)
    if parent_res > res:
        raise SpatialIndexError(
            f"parent resolution {parent_res} finer than cell resolution {res}"
        )
    out = cell & ~(0b1111 << _RES_OFFSET) | (parent_res << _RES_OFFSET)
    for pos in range(parent_res + 1, res + 1):
        out = set_digit(out, pos, _INVALID_DIGIT)
    return out


def latlng_to_cell(lat: float, lng: float, res: int) -> int:
    check_point(lat, lng)
    _check_res(res)
    return h3.str_to_int(h3.latlng_to_cell(lat, lng, res))


def derive_features(lat: float, lng: float, city: str) -> LocationFeatures:
    # each level indexed from the point directly, not truncated from res 9
    cells = [latlng_to_cell(lat, lng, r) for r in FEATURE_RESOLUTIONS]
    return LocationFeatures(city, *cells)


def haversine_km(lat1: float, lng1: float, lat2: float, lng2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dlat = p2 - p1
    dlng = math.radians(lng2 - lng1)
    a = math.sin(dlat / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlng / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def haversine_km_array(lat1, lng1, lat2, lng2):
    """Elementwise haversine over numpy arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dlng = np.radians(np.asarray(lng2) - np.asarray(lng1))
    a = np.sin((p2 - p1) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlng / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(a)))
