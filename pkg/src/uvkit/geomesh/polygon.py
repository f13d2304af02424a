"""Region polygons: one exterior ring, optional holes, metric coordinates.

Rings are stored open (last vertex != first) as (n, 2) float64 arrays.
Boolean operations (intersection/union/difference areas, clipping) are
delegated to shapely; everything metric-local (areas, centroids, containment,
boundary distance) is computed directly so it stays exact and dependency-light.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import shapely
import shapely.geometry as sgeom

from ..errors import InputError


def _as_ring(ring: Any) -> np.ndarray:
    arr = np.array(ring, dtype=np.float64, copy=True)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError(f"ring must be an (n, 2) array, got shape {arr.shape}")
    if len(arr) > 1 and np.array_equal(arr[0], arr[-1]):
        arr = arr[:-1]
    if len(arr) < 3:
        raise InputError(f"ring needs at least 3 distinct vertices, got {len(arr)}")
    if not np.isfinite(arr).all():
        raise InputError("ring coordinates must be finite")
    return arr


def ring_signed_area(ring: np.ndarray) -> float:
    """Shoelace signed area; positive for counter-clockwise rings (y up)."""
    x, y = ring[:, 0], ring[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return 0.5 * float(np.sum(x * yn - xn * y))


@dataclass(frozen=True)
class RegionPolygon:
    """Simple polygon with optional holes; exterior area must be positive."""

    exterior: np.ndarray
    holes: tuple[np.ndarray, ...] = ()

    def __post_init__(self) -> None:
        ext = _as_ring(self.exterior)
        holes = tuple(_as_ring(h) for h in self.holes)
        if abs(ring_signed_area(ext)) <= 0.0:
            raise InputError("polygon exterior has zero area")
        ext.flags.writeable = False
        for h in holes:
            h.flags.writeable = False
        object.__setattr__(self, "exterior", ext)
        object.__setattr__(self, "holes", holes)

    @cached_property
    def area(self) -> float:
        """Exterior area minus hole areas."""
        a = abs(ring_signed_area(self.exterior))
        return a - sum(abs(ring_signed_area(h)) for h in self.holes)

    def rings(self) -> Iterable[np.ndarray]:
        yield self.exterior
        yield from self.holes

    def bounds(self) -> tuple[float, float, float, float]:
        xmin, ymin = self.exterior.min(axis=0)
        xmax, ymax = self.exterior.max(axis=0)
        return float(xmin), float(ymin), float(xmax), float(ymax)

    def translated(self, dx: float, dy: float) -> "RegionPolygon":
        return RegionPolygon(self.exterior + (dx, dy), tuple(h + (dx, dy) for h in self.holes))


def region_area(poly: RegionPolygon) -> float:
    return poly.area


def _point_in_ring(x: float, y: float, ring: np.ndarray) -> bool:
    # Even-odd ray cast toward +x with the half-open rule (y1 <= y) != (y2 <= y),
    # so vertices on the ray are counted once.
    x1, y1 = ring[:, 0], ring[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    straddles = (y1 <= y) != (y2 <= y)
    if not straddles.any():
        return False
    xs1, ys1, xs2, ys2 = x1[straddles], y1[straddles], x2[straddles], y2[straddles]
    xcross = xs1 + (y - ys1) * (xs2 - xs1) / (ys2 - ys1)
    return bool(np.count_nonzero(xcross > x) % 2)


def point_in_polygon(x: float, y: float, poly: RegionPolygon) -> bool:
    """Even-odd containment: inside the exterior and outside every hole."""
    if not _point_in_ring(x, y, poly.exterior):
        return False
    for hole in poly.holes:
        if _point_in_ring(x, y, hole):
            return False
    return True


def _ring_distance(x: float, y: float, ring: np.ndarray) -> float:
    a = ring
    b = np.roll(ring, -1, axis=0)
    d = b - a
    p = np.array([x, y]) - a
    seg_len2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.divide(np.einsum("ij,ij->i", p, d), seg_len2, where=seg_len2 > 0), 0.0, 1.0)
    t[seg_len2 == 0] = 0.0
    closest = a + t[:, None] * d
    diff = np.array([x, y]) - closest
    return float(np.sqrt(np.einsum("ij,ij->i", diff, diff).min()))


def distance_to_boundary(point: Sequence[float], poly: RegionPolygon) -> float:
    """Unsigned distance from a point to the nearest point on any ring."""
    x, y = float(point[0]), float(point[1])
    return min(_ring_distance(x, y, ring) for ring in poly.rings())


def polygon_centroid(poly: RegionPolygon) -> tuple[float, float]:
    """Area centroid; holes subtract with negative weight."""
    sx = sy = sa = 0.0
    for ring, sign in [(poly.exterior, 1.0)] + [(h, -1.0) for h in poly.holes]:
        x, y = ring[:, 0], ring[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cross = x * yn - xn * y
        a = 0.5 * float(np.sum(cross))
        if a == 0.0:
            continue
        cx = float(np.sum((x + xn) * cross)) / (6.0 * a)
        cy = float(np.sum((y + yn) * cross)) / (6.0 * a)
        w = sign * abs(a)
        sx += w * cx
        sy += w * cy
        sa += w
    if sa == 0.0:
        raise InputError("degenerate polygon: zero net area")
    return (sx / sa, sy / sa)


# ---------------------------------------------------------------------------
# shapely bridge (boolean operations only)
# ---------------------------------------------------------------------------


def to_shapely(poly: RegionPolygon) -> sgeom.Polygon:
    return sgeom.Polygon(poly.exterior, [h for h in poly.holes])


def from_shapely(geom) -> list[RegionPolygon]:
    """Decompose a shapely geometry into RegionPolygons, dropping zero-area
    pieces and non-areal members of collections."""
    out: list[RegionPolygon] = []
    if geom.is_empty:
        return out
    if isinstance(geom, sgeom.Polygon):
        if geom.area > 0:
            out.append(
                RegionPolygon(
                    np.asarray(geom.exterior.coords),
                    tuple(np.asarray(r.coords) for r in geom.interiors if sgeom.Polygon(r).area > 0),
                )
            )
    elif isinstance(geom, (sgeom.MultiPolygon, sgeom.GeometryCollection)):
        for part in geom.geoms:
            out.extend(from_shapely(part))
    return out


def intersection_area(a: RegionPolygon, b: RegionPolygon) -> float:
    return float(to_shapely(a).intersection(to_shapely(b)).area)


def union_area(regions: Sequence[RegionPolygon]) -> float:
    if not regions:
        return 0.0
    return float(shapely.union_all([to_shapely(r) for r in regions]).area)


def clip_region(poly: RegionPolygon, clipper) -> list[RegionPolygon]:
    """Intersect one region with a shapely geometry; parts keep no order
    guarantee beyond shapely's, so callers sort if they need determinism."""
    return from_shapely(to_shapely(poly).intersection(clipper))


# ---------------------------------------------------------------------------
# GeoJSON exchange: FeatureCollection with a top-level crs_epsg member,
# coordinates in the projected CRS. Rings are written closed.
# ---------------------------------------------------------------------------


def _poly_coords(poly: RegionPolygon) -> list[list[list[float]]]:
    rings = []
    for ring in poly.rings():
        closed = np.vstack([ring, ring[:1]])
        rings.append([[float(x), float(y)] for x, y in closed])
    return rings


def regions_to_feature_collection(
    features: Sequence[tuple[dict, RegionPolygon | Sequence[RegionPolygon]]],
    crs_epsg: int,
) -> dict:
    out = []
    for props, shape in features:
        if isinstance(shape, RegionPolygon):
            geometry = {"type": "Polygon", "coordinates": _poly_coords(shape)}
        else:
            parts = list(shape)
            if len(parts) == 1:
                geometry = {"type": "Polygon", "coordinates": _poly_coords(parts[0])}
            else:
                geometry = {"type": "MultiPolygon", "coordinates": [_poly_coords(p) for p in parts]}
        out.append({"type": "Feature", "properties": dict(props), "geometry": geometry})
    return {"type": "FeatureCollection", "crs_epsg": int(crs_epsg), "features": out}


def write_geojson(collection: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(collection, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _geometry_regions(geometry: dict) -> list[RegionPolygon]:
    gtype = geometry.get("type")
    if gtype == "Polygon":
        rings = geometry["coordinates"]
        return [RegionPolygon(np.asarray(rings[0]), tuple(np.asarray(r) for r in rings[1:]))]
    if gtype == "MultiPolygon":
        out = []
        for rings in geometry["coordinates"]:
            out.append(RegionPolygon(np.asarray(rings[0]), tuple(np.asarray(r) for r in rings[1:])))
        return out
    raise InputError(f"unsupported geometry type {gtype!r} (expected Polygon/MultiPolygon)")


def read_geojson(path: str | Path) -> tuple[list[tuple[dict, list[RegionPolygon]]], int]:
    """Load a FeatureCollection; returns ([(properties, polygon parts)], crs_epsg)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise InputError(f"{path}: expected a FeatureCollection")
    if "crs_epsg" not in doc:
        raise InputError(f"{path}: missing top-level crs_epsg")
    feats = []
    for feat in doc.get("features", []):
        feats.append((feat.get("properties") or {}, _geometry_regions(feat["geometry"])))
    return feats, int(doc["crs_epsg"])
