"""Exact conversion between binary rasters and region polygons.

vectorize traces component boundaries along pixel edges, so every output
vertex is a pixel corner; rasterize samples polygon membership at pixel
centers with the even-odd rule. Because traced edges sit on the half-integer
offset grid away from the sampled centers, rasterize(vectorize(m)) == m holds
exactly for any mask.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np

from ..errors import InputError
from .mask import BinaryMask, Frame, connected_components
from .polygon import RegionPolygon, ring_signed_area

# Directed boundary edges per foreground pixel (pixel-corner coordinates,
# x = col, y = row growing downward). Each unit edge appears for exactly one
# fg/bg pixel pair, so the successor relation below is a permutation and the
# edges decompose into closed loops.
#   top:    (c, r)     -> (c+1, r)
#   right:  (c+1, r)   -> (c+1, r+1)
#   bottom: (c+1, r+1) -> (c, r+1)
#   left:   (c, r+1)   -> (c, r)


def _boundary_edges(fg: np.ndarray, labels: np.ndarray):
    padded = np.pad(fg, 1, constant_values=False)
    pieces = []
    specs = [
        (padded[:-2, 1:-1], (0, 0), (1, 0)),  # top neighbor background
        (padded[1:-1, 2:], (1, 0), (1, 1)),  # right
        (padded[2:, 1:-1], (1, 1), (0, 1)),  # bottom
        (padded[1:-1, :-2], (0, 1), (0, 0)),  # left
    ]
    for neighbor, (sdx, sdy), (edx, edy) in specs:
        rows, cols = np.nonzero(fg & ~neighbor)
        pieces.append(
            (
                cols + sdx,
                rows + sdy,
                cols + edx,
                rows + edy,
                labels[rows, cols],
            )
        )
    sx = np.concatenate([p[0] for p in pieces])
    sy = np.concatenate([p[1] for p in pieces])
    ex = np.concatenate([p[2] for p in pieces])
    ey = np.concatenate([p[3] for p in pieces])
    owner = np.concatenate([p[4] for p in pieces])
    return sx, sy, ex, ey, owner


def _compress_collinear(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Keep only corners where the walk changes direction (cyclic)."""
    dx = np.diff(np.append(xs, xs[0]))
    dy = np.diff(np.append(ys, ys[0]))
    prev_dx = np.roll(dx, 1)
    prev_dy = np.roll(dy, 1)
    turns = (dx != prev_dx) | (dy != prev_dy)
    return np.column_stack([xs[turns], ys[turns]])


def vectorize(mask: BinaryMask) -> list[RegionPolygon]:
    """Trace each 4-connected component into a polygon (exterior plus holes).

    Output order follows component discovery order; exteriors are oriented
    counter-clockwise in world coordinates, holes clockwise. An empty mask
    gives an empty list."""
    comps = connected_components(mask)
    if comps.count == 0:
        return []
    fg = mask.data.astype(bool)
    sx, sy, ex, ey, owner = _boundary_edges(fg, comps.labels)
    n_edges = len(sx)
    stride = mask.width + 1
    start_key = sy.astype(np.int64) * stride + sx
    end_key = ey.astype(np.int64) * stride + ex
    dx = (ex - sx).astype(np.int64)
    dy = (ey - sy).astype(np.int64)

    start_map: dict[int, list[int]] = defaultdict(list)
    for idx in range(n_edges):
        start_map[int(start_key[idx])].append(idx)

    used = np.zeros(n_edges, dtype=bool)
    loops_by_label: dict[int, list[tuple[float, np.ndarray]]] = defaultdict(list)
    ox, oy = mask.origin
    res = mask.resolution

    for e0 in range(n_edges):
        if used[e0]:
            continue
        xs_list = [int(sx[e0])]
        ys_list = [int(sy[e0])]
        e = e0
        while True:
            used[e] = True
            corner = int(end_key[e])
            cands = start_map[corner]
            if len(cands) == 1:
                nxt = cands[0]
            else:
                # two diagonal pixels meet here; the exit with positive cross
                # product stays on the current pixel's fan, which keeps
                # 4-connected components (and their holes) separate
                nxt = -1
                for cand in cands:
                    if dx[e] * dy[cand] - dy[e] * dx[cand] > 0:
                        nxt = cand
                        break
                if nxt < 0:
                    raise AssertionError("boundary walk lost its successor edge")
            if nxt == e0:
                break
            xs_list.append(int(sx[nxt]))
            ys_list.append(int(sy[nxt]))
            e = nxt
        ring_px = _compress_collinear(np.array(xs_list, dtype=np.float64), np.array(ys_list, dtype=np.float64))
        world = np.column_stack([ox + ring_px[:, 0] * res, oy - ring_px[:, 1] * res])
        loops_by_label[int(owner[e0])].append((ring_signed_area(world), world))

    polygons: list[RegionPolygon] = []
    for label in range(1, comps.count + 1):
        loops = loops_by_label[label]
        ext_pos = max(range(len(loops)), key=lambda k: abs(loops[k][0]))
        ext_area, ext_ring = loops[ext_pos]
        if ext_area < 0:
            ext_ring = ext_ring[::-1]
        holes = []
        for k, (area, ring) in enumerate(loops):
            if k == ext_pos:
                continue
            holes.append(ring if area < 0 else ring[::-1])
        polygons.append(RegionPolygon(ext_ring, tuple(holes)))
    return polygons


def _fill_polygon(out: np.ndarray, rings: Sequence[np.ndarray], frame: Frame) -> None:
    ox, oy = frame.origin
    res = frame.resolution
    height, width = frame.shape

    px1_all, py1_all, px2_all, py2_all = [], [], [], []
    for ring in rings:
        px = (ring[:, 0] - ox) / res
        py = (oy - ring[:, 1]) / res
        px1_all.append(px)
        py1_all.append(py)
        px2_all.append(np.roll(px, -1))
        py2_all.append(np.roll(py, -1))
    px1 = np.concatenate(px1_all)
    py1 = np.concatenate(py1_all)
    px2 = np.concatenate(px2_all)
    py2 = np.concatenate(py2_all)

    ylo = np.minimum(py1, py2)
    yhi = np.maximum(py1, py2)
    r0 = np.maximum(np.ceil(ylo - 0.5), 0.0).astype(np.int64)
    r1 = np.minimum(np.ceil(yhi - 0.5), float(height)).astype(np.int64)
    counts = np.maximum(r1 - r0, 0)
    total = int(counts.sum())
    if total == 0:
        return
    edge_idx = np.repeat(np.arange(len(px1)), counts)
    starts = np.cumsum(counts) - counts
    rows = np.arange(total) - np.repeat(starts, counts) + np.repeat(r0, counts)
    yc = rows + 0.5
    # horizontal edges never appear here: their row count is zero
    xcross = px1[edge_idx] + (yc - py1[edge_idx]) * (px2[edge_idx] - px1[edge_idx]) / (
        py2[edge_idx] - py1[edge_idx]
    )

    order = np.lexsort((xcross, rows))
    rows = rows[order]
    xcross = xcross[order]
    row_starts = np.searchsorted(rows, np.arange(height), side="left")
    row_ends = np.searchsorted(rows, np.arange(height), side="right")
    for r in range(height):
        a, b = row_starts[r], row_ends[r]
        if a == b:
            continue
        xs = xcross[a:b]
        # crossings come in pairs for closed rings; guard against a stray odd
        # count from degenerate inputs by ignoring the unmatched tail
        for k in range(0, len(xs) - len(xs) % 2, 2):
            c0 = int(max(np.ceil(xs[k] - 0.5), 0.0))
            c1 = int(min(np.ceil(xs[k + 1] - 0.5), float(width)))
            if c1 > c0:
                out[r, c0:c1] = True


def rasterize(polys: Sequence[RegionPolygon], frame: Frame) -> BinaryMask:
    """Burn polygons into a raster: a pixel is set when its center is inside
    (even-odd, holes excluded) any of the polygons.

    Raises InputError when a polygon lies entirely outside the frame, naming
    the offending indices."""
    fxmin, fymin, fxmax, fymax = frame.bounds()
    offenders = []
    for k, poly in enumerate(polys):
        xmin, ymin, xmax, ymax = poly.bounds()
        if xmax <= fxmin or xmin >= fxmax or ymax <= fymin or ymin >= fymax:
            offenders.append(k)
    if offenders:
        raise InputError(f"polygons entirely outside the frame: indices {offenders}")
    out = np.zeros(frame.shape, dtype=bool)
    for poly in polys:
        _fill_polygon(out, list(poly.rings()), frame)
    return BinaryMask(out.astype(np.uint8), frame.origin, frame.resolution)
