"""Pole of inaccessibility: the interior point farthest from the boundary.

Priority-driven quadtree cell subdivision over the polygon's bounding box.
Each cell is scored by the signed boundary distance at its center; a cell can
only beat the incumbent if center_distance + half_diagonal does so, which
bounds the search and guarantees the result is within `precision` of the true
clearance."""

from __future__ import annotations

import heapq
import itertools
import math

from ..errors import InputError
from .polygon import RegionPolygon, distance_to_boundary, point_in_polygon, polygon_centroid

_SQRT2 = math.sqrt(2.0)


def signed_distance(x: float, y: float, poly: RegionPolygon) -> float:
    """Boundary distance, positive inside the polygon and negative outside."""
    d = distance_to_boundary((x, y), poly)
    return d if point_in_polygon(x, y, poly) else -d


def pole_of_inaccessibility(
    poly: RegionPolygon, precision: float = 1.0
) -> tuple[tuple[float, float], float]:
    """Returns ((x, y), clearance) with clearance within `precision` of the
    maximum inscribed-circle radius. The returned point lies inside poly."""
    if precision <= 0:
        raise InputError(f"precision must be positive, got {precision}")
    xmin, ymin, xmax, ymax = poly.bounds()
    width, height = xmax - xmin, ymax - ymin
    cell_size = min(width, height)
    if cell_size == 0.0:
        raise InputError("degenerate polygon: zero-extent bounding box")

    counter = itertools.count()  # tie-break so the heap never compares tuples of floats only

    def make(cx: float, cy: float, h: float):
        d = signed_distance(cx, cy, poly)
        return (-(d + h * _SQRT2), next(counter), cx, cy, h, d)

    h0 = cell_size / 2.0
    heap = []
    x = xmin
    while x < xmax:
        y = ymin
        while y < ymax:
            heapq.heappush(heap, make(x + h0, y + h0, h0))
            y += cell_size
        x += cell_size

    # seed with the centroid and the bbox center: good guesses that let the
    # bound prune early
    centroid_x, centroid_y = polygon_centroid(poly)
    best = (signed_distance(centroid_x, centroid_y, poly), centroid_x, centroid_y)
    bx, by = xmin + width / 2.0, ymin + height / 2.0
    cand = (signed_distance(bx, by, poly), bx, by)
    if cand[0] > best[0]:
        best = cand

    while heap:
        neg_max, _, cx, cy, h, d = heapq.heappop(heap)
        if d > best[0]:
            best = (d, cx, cy)
        if -neg_max - best[0] <= precision:
            continue
        h2 = h / 2.0
        for dx, dy in ((-h2, -h2), (-h2, h2), (h2, -h2), (h2, h2)):
            heapq.heappush(heap, make(cx + dx, cy + dy, h2))

    if best[0] < 0:
        # can happen only for slivers thinner than the precision; fall back to
        # the centroid if it is interior, else report the failure
        if point_in_polygon(centroid_x, centroid_y, poly):
            return ((centroid_x, centroid_y), 0.0)
        raise InputError("no interior point found at the requested precision")
    return ((best[1], best[2]), best[0])
