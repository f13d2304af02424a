"""Similarity-guided collection of training cells and tile cropping.

A city extent is tiled into square grid cells (512 m by default). Candidate
cells are scored against operator-chosen anchor cells by mean-pooled cosine
similarity of their patch-embedding matrices, then ranked into a confusion
band (hardest lookalikes) and a diversity band (mid-ranked variety).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError
from .geomesh import BinaryMask, Frame, RegionPolygon, rasterize, write_grid


class CellStatus(str, Enum):
    ANCHOR = "anchor"
    UNLABELED = "unlabeled"
    POSITIVE = "annotated-positive"
    NEGATIVE = "annotated-negative"


@dataclass(frozen=True)
class GridCell:
    """One square cell of the sampling lattice. bounds is (xmin, ymin, xmax, ymax)."""

    cell_id: int
    bounds: tuple[float, float, float, float]
    status: CellStatus = CellStatus.UNLABELED
    annotations: tuple[RegionPolygon, ...] = ()

    @property
    def size(self) -> float:
        return self.bounds[2] - self.bounds[0]


def grid_cells(extent: tuple[float, float, float, float], cell_size: float = 512.0) -> list[GridCell]:
    """Partition an extent's bounding box into non-overlapping square cells.

    Cells are half-open on their max edges, so every point of the extent lies
    in exactly one cell. cell_id runs in raster order, top-left first."""
    if cell_size <= 0:
        raise InputError(f"cell size must be positive, got {cell_size}")
    xmin, ymin, xmax, ymax = extent
    if xmax <= xmin or ymax <= ymin:
        raise InputError(f"empty extent {extent}")
    ncols = int(np.ceil((xmax - xmin) / cell_size))
    nrows = int(np.ceil((ymax - ymin) / cell_size))
    cells = []
    for r in range(nrows):
        top = ymax - r * cell_size
        for c in range(ncols):
            left = xmin + c * cell_size
            cells.append(
                GridCell(cell_id=r * ncols + c, bounds=(left, top - cell_size, left + cell_size, top))
            )
    return cells


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Patch embeddings for one cell: shape (patches, dim), finite, patches >= 1."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InputError(f"embedding matrix must be (patches, dim), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InputError("embedding matrix must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SimilarityScore:
    cell_id: int
    alpha_sim: float
    rank: int | None = None


def mean_pool(matrix: EmbeddingMatrix) -> np.ndarray:
    """Column-wise mean over patches: one vector per cell."""
    return matrix.values.mean(axis=0)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise InputError("cosine undefined for a zero-norm pooled embedding")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def similarity(candidate: EmbeddingMatrix, anchors: Sequence[EmbeddingMatrix]) -> float:
    """Mean cosine similarity between the candidate's pooled embedding and
    each anchor's pooled embedding. Lies in [-1, 1]; scale-invariant."""
    if not anchors:
        raise InputError("similarity needs at least one anchor")
    u = mean_pool(candidate)
    sims = [_cosine(u, mean_pool(a)) for a in anchors]
    return sum(sims) / len(sims)


def rank_scores(scores: Sequence[SimilarityScore]) -> list[SimilarityScore]:
    """Dense ranking 1..n by descending alpha_sim; ties break by ascending
    cell_id so the ordering is total and reproducible."""
    ordered = sorted(scores, key=lambda s: (-s.alpha_sim, s.cell_id))
    return [replace(s, rank=i + 1) for i, s in enumerate(ordered)]


def rank_and_band(
    scores: Sequence[SimilarityScore],
    top_frac: float = 0.05,
    band: tuple[float, float] = (0.10, 0.30),
) -> tuple[list[SimilarityScore], list[SimilarityScore]]:
    """Split ranked scores into the confusion band and the diversity band.

    Confusion candidates are ranks 1..ceil(top_frac*n); diversity candidates
    are ranks in (ceil(band[0]*n), ceil(band[1]*n)]. With fewer cells than
    1/top_frac the bands shrink but never error."""
    lo, hi = band
    if not (0.0 < top_frac < lo < hi <= 1.0):
        raise InputError(f"need 0 < top_frac < band.low < band.high <= 1, got {top_frac}, {band}")
    if not scores:
        raise InputError("rank_and_band needs at least one score")
    ranked = rank_scores(scores)
    n = len(ranked)
    k_top = int(np.ceil(top_frac * n))
    k_lo = int(np.ceil(lo * n))
    k_hi = int(np.ceil(hi * n))
    confusion = ranked[:k_top]
    diversity = ranked[k_lo:k_hi]
    return confusion, diversity


def crop_training_tiles(
    cells: Sequence[GridCell],
    out_dir: str | Path,
    tile_px: int = 256,
    resolution: float = 1.0,
) -> dict:
    """Write per-cell label rasters cut into tile_px x tile_px tiles.

    Positive cells (anchor or annotated-positive) must carry annotation
    polygons, which are rasterized at `resolution`; negative cells produce
    all-zero labels. Unlabeled cells are rejected. Returns the manifest that
    is also written to <out_dir>/tiles.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for cell in cells:
        if cell.status == CellStatus.UNLABELED:
            raise InputError(f"cell {cell.cell_id} has no annotation status")
        positive = cell.status in (CellStatus.ANCHOR, CellStatus.POSITIVE)
        if positive and not cell.annotations:
            raise InputError(f"positive cell {cell.cell_id} has no annotation polygons")
        xmin, ymin, xmax, ymax = cell.bounds
        size_px = int(round((xmax - xmin) / resolution))
        if abs(size_px * resolution - (xmax - xmin)) > 1e-9 or size_px % tile_px != 0:
            raise InputError(
                f"cell {cell.cell_id}: size {xmax - xmin} m at {resolution} m/px "
                f"does not divide into {tile_px} px tiles"
            )
        frame = Frame(size_px, size_px, (xmin, ymax), resolution)
        if positive:
            overlapping = [
                p
                for p in cell.annotations
                if not (
                    p.bounds()[2] <= xmin or p.bounds()[0] >= xmax or p.bounds()[3] <= ymin or p.bounds()[1] >= ymax
                )
            ]
            if not overlapping:
                raise InputError(f"positive cell {cell.cell_id}: no annotation overlaps the cell")
            label = rasterize(overlapping, frame)
        else:
            label = frame.blank()
        per_side = size_px // tile_px
        for tr in range(per_side):
            for tc in range(per_side):
                sub = label.data[tr * tile_px : (tr + 1) * tile_px, tc * tile_px : (tc + 1) * tile_px]
                origin = (xmin + tc * tile_px * resolution, ymax - tr * tile_px * resolution)
                tile = BinaryMask(sub, origin, resolution)
                name = f"tile_{cell.cell_id:06d}_{tr}_{tc}.grid"
                write_grid(tile, out_dir / name)
                entries.append(
                    {
                        "tile_id": f"{cell.cell_id}:{tr}:{tc}",
                        "cell_id": cell.cell_id,
                        "label_ref": name,
                        "origin": [origin[0], origin[1]],
                        "resolution": resolution,
                        "tile_px": tile_px,
                        "positive": bool(positive and sub.any()),
                        "cell_status": cell.status.value,
                    }
                )
    manifest = {"tile_px": tile_px, "tiles": entries}
    with open(out_dir / "tiles.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest
