"""City-level analytics over mapped informal-settlement regions.

Covers the share of the urban footprint the regions occupy, a closed-form
least-squares fit relating settlement area to built-up area across cities, a
boundary-relative location index (how deep inside the urban footprint the
regions sit, with a Peripheral/Mosaic split at the cross-city mean), and
building-stock contrasts between the regions and the rest of the urban area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import shapely

from .errors import InputError
from .geomesh import (
    RegionPolygon,
    distance_to_boundary,
    point_in_polygon,
    pole_of_inaccessibility,
    polygon_centroid,
    to_shapely,
)

PATTERN_PERIPHERAL = "Peripheral"
PATTERN_MOSAIC = "Mosaic"


def _as_parts(geometry: RegionPolygon | Sequence[RegionPolygon]) -> tuple[RegionPolygon, ...]:
    if isinstance(geometry, RegionPolygon):
        return (geometry,)
    parts = tuple(geometry)
    if not parts or not all(isinstance(p, RegionPolygon) for p in parts):
        raise InputError("expected a region polygon or a non-empty sequence of them")
    return parts


@dataclass(frozen=True)
class CityRecord:
    """One city's built-up footprint and its mapped regions.

    The footprint may be multi-part (satellite towns); every mapped region
    must overlap it with positive area."""

    city_id: str
    gub: tuple[RegionPolygon, ...]
    uv_regions: tuple[RegionPolygon, ...]
    region_key: str = ""

    def __init__(
        self,
        city_id: str,
        gub: RegionPolygon | Sequence[RegionPolygon],
        uv_regions: Sequence[RegionPolygon] = (),
        region_key: str = "",
    ) -> None:
        object.__setattr__(self, "city_id", str(city_id))
        object.__setattr__(self, "gub", _as_parts(gub))
        object.__setattr__(self, "uv_regions", tuple(uv_regions))
        object.__setattr__(self, "region_key", str(region_key))
        if self.gub_geom.area <= 0:
            raise InputError(f"city {city_id}: built-up footprint has zero area")
        for i, uv in enumerate(self.uv_regions):
            if to_shapely(uv).intersection(self.gub_geom).area <= 0:
                raise InputError(f"city {city_id}: region {i} does not overlap the built-up footprint")

    @property
    def gub_geom(self) -> shapely.Geometry:
        return shapely.union_all([to_shapely(p) for p in self.gub])

    @property
    def uv_geom(self) -> shapely.Geometry:
        if not self.uv_regions:
            return shapely.Polygon()
        return shapely.union_all([to_shapely(r) for r in self.uv_regions])

    @property
    def gub_area_m2(self) -> float:
        return float(self.gub_geom.area)


def uv_proportion(city: CityRecord) -> float:
    """Share of the built-up footprint covered by the mapped regions.

    Regions are unioned before clipping so doubly-mapped ground never counts
    twice (with disjoint regions this equals the per-region sum)."""
    gub_geom = city.gub_geom
    if not city.uv_regions:
        return 0.0
    return float(city.uv_geom.intersection(gub_geom).area / gub_geom.area)


@dataclass(frozen=True)
class LinearFit:
    """y = slope * x + intercept by ordinary least squares."""

    slope: float
    intercept: float
    r_squared: float
    residuals: tuple[float, ...]
    n: int

    def predict(self, x: float) -> float:
        return self.slope * x + self.intercept

    def ranked_residuals(self) -> list[tuple[int, float]]:
        """Sample indices from most-above-trend to most-below-trend."""
        order = sorted(range(self.n), key=lambda i: (-self.residuals[i], i))
        return [(i, self.residuals[i]) for i in order]


def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise InputError("x and y must be 1-D sequences of equal length")
    if xs.size < 2:
        raise InputError(f"need at least 2 samples, got {xs.size}")
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise InputError("samples must be finite")
    xm = float(xs.mean())
    ym = float(ys.mean())
    sxx = float(((xs - xm) ** 2).sum())
    if sxx == 0.0:
        raise InputError("independent variable has zero variance; slope is undefined")
    sxy = float(((xs - xm) * (ys - ym)).sum())
    slope = sxy / sxx
    intercept = ym - slope * xm
    resid = ys - (slope * xs + intercept)
    syy = float(((ys - ym) ** 2).sum())
    # constant y carries no variance to explain: r^2 reported as 0
    r2 = 0.0 if syy == 0.0 else 1.0 - float((resid**2).sum()) / syy
    return LinearFit(
        slope=slope,
        intercept=intercept,
        r_squared=r2,
        residuals=tuple(float(v) for v in resid),
        n=int(xs.size),
    )


def built_up_regression(cities: Sequence[CityRecord]) -> LinearFit:
    """Regress total mapped-region area (km^2) on built-up area (km^2)."""
    if len(cities) < 3:
        raise InputError(f"need at least 3 cities, got {len(cities)}")
    x = [c.gub_area_m2 / 1e6 for c in cities]
    y = [float(c.uv_geom.intersection(c.gub_geom).area) / 1e6 for c in cities]
    return linear_fit(x, y)


@dataclass(frozen=True)
class PerRegionDepth:
    region_id: int
    anchor: tuple[float, float]
    distance_m: float
    normalized: float  # min(1, distance / max interior clearance)
    area_m2: float


@dataclass(frozen=True)
class PeripheryResult:
    """Boundary-relative location of a city's mapped regions.

    city_index is the area-weighted mean of per-region normalized depths;
    0 means the regions sit on the urban edge, 1 means they sit as deep as
    the footprint allows. pattern stays None until a cross-city
    classification assigns it."""

    city_id: str
    per_uv: tuple[PerRegionDepth, ...]
    city_index: float
    pia_distance_m: float
    pattern: str | None = None

    def with_pattern(self, pattern: str) -> "PeripheryResult":
        return PeripheryResult(self.city_id, self.per_uv, self.city_index, self.pia_distance_m, pattern)


def periphery_index(city: CityRecord, precision: float = 1.0) -> PeripheryResult:
    """Area-weighted mean normalized interior depth of a city's regions.

    Per region the anchor is its centroid when that falls inside the built-up
    footprint, otherwise the region's own most-interior point. Depth is the
    anchor's distance to the boundary of the footprint part containing it
    (0 when no part contains it), normalized by the footprint's largest
    interior clearance and clamped at 1."""
    if not city.uv_regions:
        raise InputError(f"city {city.city_id}: no regions to profile")
    if precision <= 0:
        raise InputError(f"precision must be positive, got {precision}")
    pia_distance = 0.0
    for part in city.gub:
        _, clearance = pole_of_inaccessibility(part, precision=precision)
        pia_distance = max(pia_distance, clearance)
    if pia_distance <= precision:
        raise InputError(
            f"city {city.city_id}: built-up footprint too thin to normalize "
            f"(max clearance {pia_distance:.3g} m <= precision {precision:.3g} m)"
        )
    per_uv = []
    for i, region in enumerate(city.uv_regions):
        cx, cy = polygon_centroid(region)
        if any(point_in_polygon(cx, cy, part) for part in city.gub):
            anchor = (cx, cy)
        else:
            (px, py), _ = pole_of_inaccessibility(region, precision=precision)
            anchor = (px, py)
        container = next((p for p in city.gub if point_in_polygon(anchor[0], anchor[1], p)), None)
        distance_m = distance_to_boundary(anchor, container) if container is not None else 0.0
        per_uv.append(
            PerRegionDepth(
                region_id=i,
                anchor=anchor,
                distance_m=distance_m,
                normalized=min(1.0, distance_m / pia_distance),
                area_m2=region.area,
            )
        )
    total_area = sum(p.area_m2 for p in per_uv)
    index = sum(p.area_m2 * p.normalized for p in per_uv) / total_area
    return PeripheryResult(
        city_id=city.city_id,
        per_uv=tuple(per_uv),
        city_index=index,
        pia_distance_m=pia_distance,
    )


def classify_pattern(indices: Mapping[str, float]) -> dict[str, str]:
    """Split cities at the arithmetic mean of their location indices: at or
    below the mean the regions ring the urban fringe (Peripheral), above it
    they are interwoven with the urban core (Mosaic)."""
    if not indices:
        raise InputError("no cities to classify")
    threshold = sum(indices.values()) / len(indices)
    return {
        name: (PATTERN_PERIPHERAL if value <= threshold else PATTERN_MOSAIC)
        for name, value in indices.items()
    }


@dataclass(frozen=True)
class BuildingRecord:
    footprint: RegionPolygon
    height_m: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.height_m) and self.height_m >= 0.0):
            raise InputError(f"building height must be finite and >= 0, got {self.height_m}")


@dataclass(frozen=True)
class BuildingStats:
    zone: str  # "UV" | "non-UV"
    mean_height_m: float | None
    bcr: float
    count: int
    region_key: str = ""

    @property
    def absent(self) -> bool:
        return self.count == 0


def building_stats(
    city: CityRecord,
    buildings: Sequence[BuildingRecord],
) -> tuple[BuildingStats, BuildingStats]:
    """Building-stock contrast between the mapped regions and the rest of the
    built-up footprint.

    Only buildings whose footprint centroid lies in the built-up footprint
    are considered; each goes to the region zone when its centroid falls in
    any mapped region, else to the complement zone. Mean height is the
    unweighted mean over assigned buildings (None when the zone is empty);
    coverage is built-footprint area clipped to the zone over zone area."""
    gub_geom = city.gub_geom
    uv_geom = city.uv_geom
    zone_uv = gub_geom.intersection(uv_geom)
    zone_other = gub_geom.difference(uv_geom)

    heights: dict[str, list[float]] = {"UV": [], "non-UV": []}
    covered = {"UV": 0.0, "non-UV": 0.0}
    for b in buildings:
        cx, cy = polygon_centroid(b.footprint)
        if not any(point_in_polygon(cx, cy, part) for part in city.gub):
            continue
        in_uv = any(point_in_polygon(cx, cy, r) for r in city.uv_regions)
        heights["UV" if in_uv else "non-UV"].append(b.height_m)
        fp = to_shapely(b.footprint)
        covered["UV"] += float(fp.intersection(zone_uv).area)
        covered["non-UV"] += float(fp.intersection(zone_other).area)

    def stats(zone_name: str, zone_geom: shapely.Geometry) -> BuildingStats:
        zone_area = float(zone_geom.area)
        hs = heights[zone_name]
        return BuildingStats(
            zone=zone_name,
            mean_height_m=(sum(hs) / len(hs)) if hs else None,
            bcr=(covered[zone_name] / zone_area) if zone_area > 0 else 0.0,
            count=len(hs),
            region_key=city.region_key,
        )

    return (stats("UV", zone_uv), stats("non-UV", zone_other))


@dataclass(frozen=True)
class CityAnalytics:
    """One CSV row of the cross-city study."""

    city_id: str
    gub_km2: float
    uv_km2: float
    proportion: float
    periphery_index: float
    pattern: str
    mean_height_uv: float | None
    mean_height_nonuv: float | None
    bcr_uv: float
    bcr_nonuv: float


CSV_COLUMNS = (
    "city_id",
    "gub_km2",
    "uv_km2",
    "proportion",
    "periphery_index",
    "pattern",
    "mean_height_uv",
    "mean_height_nonuv",
    "bcr_uv",
    "bcr_nonuv",
)


def analyze_cities(
    cities: Sequence[CityRecord],
    buildings_by_city: Mapping[str, Sequence[BuildingRecord]] | None = None,
    precision: float = 1.0,
) -> tuple[list[CityAnalytics], dict]:
    """Run the full cross-city study: proportions, location indices with the
    mean-split pattern labels, building contrasts, and (with >= 3 cities) the
    area regression. Returns per-city rows plus a summary dict."""
    if not cities:
        raise InputError("no cities to analyze")
    seen = set()
    for c in cities:
        if c.city_id in seen:
            raise InputError(f"duplicate city_id {c.city_id!r}")
        seen.add(c.city_id)
    buildings_by_city = buildings_by_city or {}
    periph = {c.city_id: periphery_index(c, precision) for c in cities}
    patterns = classify_pattern({cid: p.city_index for cid, p in periph.items()})
    rows = []
    for c in cities:
        uv_stats, other_stats = building_stats(c, buildings_by_city.get(c.city_id, ()))
        rows.append(
            CityAnalytics(
                city_id=c.city_id,
                gub_km2=c.gub_area_m2 / 1e6,
                uv_km2=float(c.uv_geom.intersection(c.gub_geom).area) / 1e6,
                proportion=uv_proportion(c),
                periphery_index=periph[c.city_id].city_index,
                pattern=patterns[c.city_id],
                mean_height_uv=uv_stats.mean_height_m,
                mean_height_nonuv=other_stats.mean_height_m,
                bcr_uv=uv_stats.bcr,
                bcr_nonuv=other_stats.bcr,
            )
        )
    summary: dict = {
        "cities": len(rows),
        "mean_proportion": sum(r.proportion for r in rows) / len(rows),
        "mean_periphery_index": sum(r.periphery_index for r in rows) / len(rows),
        "pattern_counts": {
            PATTERN_PERIPHERAL: sum(1 for r in rows if r.pattern == PATTERN_PERIPHERAL),
            PATTERN_MOSAIC: sum(1 for r in rows if r.pattern == PATTERN_MOSAIC),
        },
    }
    if len(cities) >= 3:
        try:
            fit = built_up_regression(cities)
        except InputError:
            fit = None
        if fit is not None:
            ranking = fit.ranked_residuals()
            summary["regression"] = {
                "slope": fit.slope,
                "intercept": fit.intercept,
                "r_squared": fit.r_squared,
                "residual_ranking": [
                    {"city_id": cities[i].city_id, "residual_km2": r} for i, r in ranking
                ],
            }
    return rows, summary
