"""Ramer-Douglas-Peucker simplification for open chains and closed rings."""

from __future__ import annotations

import numpy as np

from ..errors import InputError


def _perp_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to segment a-b (distance to a when a == b)."""
    d = b - a
    len2 = float(d @ d)
    if len2 == 0.0:
        diff = points - a
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    t = np.clip((points - a) @ d / len2, 0.0, 1.0)
    proj = a + t[:, None] * d
    diff = points - proj
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def simplify_chain(points: np.ndarray, epsilon: float) -> np.ndarray:
    """Classic RDP on an open polyline; endpoints always survive.

    Every dropped vertex lies within epsilon of the surviving chain, and the
    result is a subsequence of the input."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise InputError(f"chain must be (n>=2, 2), got shape {pts.shape}")
    if epsilon < 0:
        raise InputError(f"epsilon must be >= 0, got {epsilon}")
    n = len(pts)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        dists = _perp_distances(pts[i + 1 : j], pts[i], pts[j])
        k = int(np.argmax(dists))
        if dists[k] > epsilon:
            mid = i + 1 + k
            keep[mid] = True
            stack.append((i, mid))
            stack.append((mid, j))
    return pts[keep]


def farthest_pair(points: np.ndarray) -> tuple[int, int]:
    """Indices of the two mutually farthest points.

    The diameter of a point set is attained on its convex hull, so a monotone
    chain hull is built first and the exact pair search runs over hull members
    only. Ties resolve to the lexicographically smallest index pair."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise InputError("need at least 2 points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))

    def half(indices):
        out: list[int] = []
        for idx in indices:
            while len(out) >= 2:
                o, a = pts[out[-2]], pts[out[-1]]
                if (a[0] - o[0]) * (pts[idx][1] - o[1]) - (a[1] - o[1]) * (pts[idx][0] - o[0]) > 0:
                    break
                out.pop()
            out.append(int(idx))
        return out[:-1]

    hull = sorted(set(half(order) + half(order[::-1])))
    if len(hull) == 1:
        return (0, 1)  # every point coincides; any pair has distance 0
    hp = pts[hull]
    d2 = np.sum((hp[:, None, :] - hp[None, :, :]) ** 2, axis=-1)
    best = (-1.0, n, n)
    for ii in range(len(hull)):
        for jj in range(ii + 1, len(hull)):
            if d2[ii, jj] > best[0]:
                best = (float(d2[ii, jj]), hull[ii], hull[jj])
    return best[1], best[2]


def simplify_ring(ring: np.ndarray, epsilon: float, min_vertices: int = 3) -> np.ndarray:
    """RDP for a closed ring (stored open, last vertex != first).

    Splits the ring at its two mutually farthest vertices, simplifies each
    half as an open chain, and rejoins. Both split vertices always survive and
    the output is a subsequence of the input up to rotation. If everything
    between the split vertices sits within epsilon (output would drop below
    min_vertices), the single most deviant interior vertex is re-added so the
    result still encloses area."""
    pts = np.asarray(ring, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise InputError(f"ring must be (n>=3, 2), got shape {pts.shape}")
    i, j = farthest_pair(pts)
    rolled = np.roll(pts, -i, axis=0)
    split = (j - i) % len(pts)
    first = rolled[: split + 1]  # runs v_i .. v_j
    second = np.vstack([rolled[split:], rolled[:1]])  # runs v_j .. back to v_i
    merged = np.vstack([simplify_chain(first, epsilon)[:-1], simplify_chain(second, epsilon)[:-1]])
    if len(merged) < min_vertices:
        best_dev, best_vertex, best_half = 0.0, None, 0
        for hidx, chain in enumerate((first, second)):
            if len(chain) <= 2:
                continue
            d = _perp_distances(chain[1:-1], chain[0], chain[-1])
            k = int(np.argmax(d))
            if d[k] > best_dev:
                best_dev, best_vertex, best_half = float(d[k]), chain[1 + k], hidx
        if best_vertex is None:
            raise InputError("ring is degenerate: all vertices collinear")
        if best_half == 0:
            merged = np.vstack([merged[:1], [best_vertex], merged[1:]])
        else:
            merged = np.vstack([merged, [best_vertex]])
    return merged
