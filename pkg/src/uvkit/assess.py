"""Stratified accuracy assessment over a hexagonal sampling lattice.

The evaluation footprint is tessellated with flat-top hexagons; a seeded,
counter-based draw picks the assessment subset (15% by default); predictions
and ground truth are clipped to the sampled footprint; detection is counted
region-by-region (a predicted region is a true positive when it overlaps
ground truth, a truth region is detected when any prediction overlaps it) and
segmentation quality is pooled pixel IoU over the sampled cells.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import shapely

from .errors import InputError
from .geomesh import (
    BinaryMask,
    Frame,
    RegionPolygon,
    from_shapely,
    rasterize,
    to_shapely,
)

SQRT3 = math.sqrt(3.0)
DEFAULT_SAMPLE_FRACTION = 0.15
DEFAULT_CIRCUMRADIUS_M = 500.0
OVERLAP_SWEEP = (0.0, 0.1, 0.5)


@dataclass(frozen=True)
class HexCell:
    """Flat-top hexagon; cell_id is its (row, col) lattice address."""

    cell_id: tuple[int, int]
    center: tuple[float, float]
    circumradius: float

    def polygon(self) -> RegionPolygon:
        cx, cy = self.center
        r = self.circumradius
        angles = np.arange(6) * (math.pi / 3.0)
        ring = np.column_stack([cx + r * np.cos(angles), cy + r * np.sin(angles)])
        return RegionPolygon(ring)


def hex_tessellate(extent: RegionPolygon, circumradius: float = DEFAULT_CIRCUMRADIUS_M) -> list[HexCell]:
    """Edge-sharing flat-top hexagonal lattice covering an extent.

    Lattice columns are spaced 1.5*r apart, rows sqrt(3)*r, odd columns
    shifted down half a row; the lattice is anchored at the extent's bbox
    min corner. A cell is kept when it overlaps the extent with positive
    area; overlaps below 1e-9 of a cell's area are treated as zero, so cells
    whose edge mathematically touches the extent never leak in through
    floating-point slivers. Cells arrive in raster order of their (row, col)
    address."""
    if circumradius <= 0:
        raise InputError(f"circumradius must be positive, got {circumradius}")
    xmin, ymin, xmax, ymax = extent.bounds()
    target = to_shapely(extent)
    row_h = SQRT3 * circumradius
    col_w = 1.5 * circumradius
    sliver = 1e-9 * (1.5 * SQRT3 * circumradius**2)
    ncols = int(math.ceil((xmax - xmin + circumradius) / col_w)) + 1
    nrows = int(math.ceil((ymax - ymin + row_h) / row_h)) + 1
    cells = []
    for row in range(-1, nrows + 1):
        for col in range(-1, ncols + 1):
            cx = xmin + col * col_w
            cy = ymin + row * row_h + (row_h / 2.0 if col % 2 else 0.0)
            cell = HexCell((row, col), (cx, cy), circumradius)
            if to_shapely(cell.polygon()).intersection(target).area > sliver:
                cells.append(cell)
    return cells


def _cell_draw(seed: int, cell_id: tuple[int, int]) -> float:
    """Uniform draw in [0, 1) keyed by (seed, cell_id): stable under lattice
    re-enumeration and independent of every other cell."""
    digest = hashlib.sha256(f"{seed}:{cell_id[0]}:{cell_id[1]}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def sample_cells(cells: Sequence[HexCell], fraction: float = DEFAULT_SAMPLE_FRACTION, seed: int = 0) -> list[HexCell]:
    """Draw round(fraction * n) cells without replacement, deterministically."""
    if not (0.0 < fraction <= 1.0):
        raise InputError(f"fraction must be in (0, 1], got {fraction}")
    k = round(fraction * len(cells))
    keyed = sorted(cells, key=lambda c: (_cell_draw(seed, c.cell_id), c.cell_id))
    return sorted(keyed[:k], key=lambda c: c.cell_id)


@dataclass(frozen=True)
class DetectionTally:
    """Region-level counts. tp/fp live on the predicted side; detected/missed
    on the truth side (one prediction may cover several truth regions, so the
    two sides are tallied separately)."""

    tp: int
    fp: int
    detected: int
    missed: int
    matched_pairs: tuple[tuple[int, int, float], ...]  # (pred idx, truth idx, overlap m^2)

    @property
    def fn(self) -> int:
        return self.missed

    @property
    def precision(self) -> float:
        total = self.tp + self.fp
        return self.tp / total if total else 0.0

    @property
    def recall(self) -> float:
        total = self.detected + self.missed
        return self.detected / total if total else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0


def detection_metrics(
    predicted: Sequence[RegionPolygon],
    truth: Sequence[RegionPolygon],
    min_overlap_frac: float = 0.0,
) -> DetectionTally:
    """Overlap-based detection counting.

    A predicted region is a true positive when its intersection with the union
    of truth regions exceeds min_overlap_frac of its own area (any positive
    overlap when the fraction is 0). A truth region is detected when any
    predicted region overlaps it with positive area."""
    if not (0.0 <= min_overlap_frac < 1.0):
        raise InputError(f"min_overlap_frac must be in [0, 1), got {min_overlap_frac}")
    pred_geoms = [to_shapely(p) for p in predicted]
    truth_geoms = [to_shapely(t) for t in truth]
    truth_union = shapely.union_all(truth_geoms) if truth_geoms else None

    tp = 0
    pairs = []
    for i, pg in enumerate(pred_geoms):
        if truth_union is not None:
            overlap = float(pg.intersection(truth_union).area)
            if overlap > min_overlap_frac * float(pg.area):
                tp += 1
        for j, tg in enumerate(truth_geoms):
            a = float(pg.intersection(tg).area)
            if a > 0.0:
                pairs.append((i, j, a))
    detected_idx = {j for _, j, _ in pairs}
    detected = len(detected_idx)
    return DetectionTally(
        tp=tp,
        fp=len(predicted) - tp,
        detected=detected,
        missed=len(truth) - detected,
        matched_pairs=tuple(pairs),
    )


def segmentation_iou(
    predicted: Sequence[RegionPolygon],
    truth: Sequence[RegionPolygon],
    frame: Frame,
    within: BinaryMask | None = None,
) -> float:
    """Pixel IoU of the two region sets rasterized on a shared frame.

    When `within` is given only pixels set there are counted. An empty union
    gives IoU 1.0 (both sets empty over the evaluated footprint)."""
    inter, union = _iou_counts(predicted, truth, frame, within)
    return inter / union if union else 1.0


def _iou_counts(
    predicted: Sequence[RegionPolygon],
    truth: Sequence[RegionPolygon],
    frame: Frame,
    within: BinaryMask | None,
) -> tuple[int, int]:
    pred_r = rasterize(predicted, frame) if predicted else frame.blank()
    truth_r = rasterize(truth, frame) if truth else frame.blank()
    a = pred_r.data.astype(bool)
    b = truth_r.data.astype(bool)
    if within is not None:
        if within.frame != frame:
            raise InputError("within-mask frame does not match the evaluation frame")
        keep = within.data.astype(bool)
        a &= keep
        b &= keep
    return (int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b)))


@dataclass(frozen=True)
class AssessmentReport:
    precision: float
    recall: float
    f1: float
    iou: float
    cells_total: int
    cells_sampled: int
    sample_area_km2: float
    overlap_sweep: Mapping[str, Mapping[str, float]]
    strata: Mapping[str, Mapping[str, float]]

    def to_json(self) -> str:
        payload = {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "iou": self.iou,
            "cells_total": self.cells_total,
            "cells_sampled": self.cells_sampled,
            "sample_area_km2": self.sample_area_km2,
            "overlap_sweep": {k: dict(v) for k, v in self.overlap_sweep.items()},
            "strata": {k: dict(v) for k, v in self.strata.items()},
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_table(self) -> str:
        rows = [("stratum", "precision", "recall", "f1", "iou")]
        rows.append(("ALL", f"{self.precision:.4f}", f"{self.recall:.4f}", f"{self.f1:.4f}", f"{self.iou:.4f}"))
        for name in sorted(self.strata):
            s = self.strata[name]
            rows.append(
                (name, f"{s['precision']:.4f}", f"{s['recall']:.4f}", f"{s['f1']:.4f}", f"{s['iou']:.4f}")
            )
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
        sweep_line = "overlap sweep (f1): " + "  ".join(
            f"{k}->{v['f1']:.4f}" for k, v in sorted(self.overlap_sweep.items(), key=lambda kv: float(kv[0]))
        )
        footer = (
            f"cells: {self.cells_sampled}/{self.cells_total} sampled, "
            f"{self.sample_area_km2:.3f} km^2"
        )
        return "\n".join(lines + [sweep_line, footer])


def _flatten_clip(regions: Sequence[RegionPolygon], clipper: shapely.Geometry) -> list[RegionPolygon]:
    """Clip each region to the footprint. A region whose clip falls apart
    contributes one polygon per surviving part; empty clips drop out."""
    out: list[RegionPolygon] = []
    for region in regions:
        out.extend(from_shapely(to_shapely(region).intersection(clipper)))
    return out


def run_assessment(
    predicted: Sequence[RegionPolygon],
    truth: Sequence[RegionPolygon],
    extent: RegionPolygon,
    frame: Frame,
    circumradius: float = DEFAULT_CIRCUMRADIUS_M,
    fraction: float = DEFAULT_SAMPLE_FRACTION,
    seed: int = 0,
    min_overlap_frac: float = 0.0,
    strata_of: Mapping[int, str] | None = None,
) -> AssessmentReport:
    """Full protocol: tessellate, sample, clip, count, pool.

    strata_of maps truth-region index -> stratum name; predictions join the
    stratum of whatever they overlap for the per-stratum breakdown, and the
    headline numbers are pooled over everything sampled."""
    cells = hex_tessellate(extent, circumradius)
    sampled = sample_cells(cells, fraction, seed)
    if not sampled:
        raise InputError("sampling produced no cells; enlarge fraction or extent")
    footprint = shapely.union_all([to_shapely(c.polygon()) for c in sampled])
    sample_area_km2 = float(footprint.intersection(to_shapely(extent)).area) / 1e6

    pred_clipped = _flatten_clip(predicted, footprint)
    truth_clipped = _flatten_clip(truth, footprint)

    tally = detection_metrics(pred_clipped, truth_clipped, min_overlap_frac)
    # border cells of the lattice may stick out past the raster frame;
    # rasterize only the parts the frame can see
    fxmin, fymin, fxmax, fymax = frame.bounds()
    frame_box = shapely.box(fxmin, fymin, fxmax, fymax)
    visible = footprint.intersection(frame_box)
    footprint_mask = rasterize(from_shapely(visible), frame) if visible.area > 0 else frame.blank()
    iou = segmentation_iou(pred_clipped, truth_clipped, frame, within=footprint_mask)

    sweep = {}
    for frac in OVERLAP_SWEEP:
        t = detection_metrics(pred_clipped, truth_clipped, frac)
        sweep[str(frac)] = {"precision": t.precision, "recall": t.recall, "f1": t.f1}

    strata: dict[str, dict[str, float]] = {}
    if strata_of:
        # split ORIGINAL regions by stratum, then clip per stratum
        names = sorted(set(strata_of.values()))
        for name in names:
            t_idx = [i for i in range(len(truth)) if strata_of.get(i) == name]
            t_sub = [truth[i] for i in t_idx]
            sub_union = shapely.union_all([to_shapely(t) for t in t_sub]) if t_sub else None
            p_sub = []
            for p in predicted:
                pg = to_shapely(p)
                if sub_union is not None and pg.intersection(sub_union).area > 0:
                    p_sub.append(p)
            pc = _flatten_clip(p_sub, footprint)
            tc = _flatten_clip(t_sub, footprint)
            st = detection_metrics(pc, tc, min_overlap_frac)
            s_iou = segmentation_iou(pc, tc, frame, within=footprint_mask)
            strata[name] = {
                "precision": st.precision,
                "recall": st.recall,
                "f1": st.f1,
                "iou": s_iou,
            }

    return AssessmentReport(
        precision=tally.precision,
        recall=tally.recall,
        f1=tally.f1,
        iou=iou,
        cells_total=len(cells),
        cells_sampled=len(sampled),
        sample_area_km2=sample_area_km2,
        overlap_sweep=sweep,
        strata=strata,
    )


def compare_products(
    products: Mapping[str, Sequence[RegionPolygon]],
    truth: Sequence[RegionPolygon],
    extent: RegionPolygon,
    frame: Frame,
    footprints: Mapping[str, RegionPolygon] | None = None,
    circumradius: float = DEFAULT_CIRCUMRADIUS_M,
    fraction: float = DEFAULT_SAMPLE_FRACTION,
    seed: int = 0,
) -> list[tuple[str, AssessmentReport]]:
    """Evaluate several products against one truth set on the intersection of
    their coverage footprints (default: the shared extent), with the identical
    sampled cell set. Rows come back sorted by f1, best first."""
    if len(products) < 2:
        raise InputError("compare_products needs at least two products")
    common = to_shapely(extent)
    if footprints:
        for name in products:
            if name in footprints:
                common = common.intersection(to_shapely(footprints[name]))
    if common.is_empty or common.area <= 0:
        raise InputError("products share no coverage footprint")
    common_regions = from_shapely(common)
    if not common_regions:
        raise InputError("products share no coverage footprint")
    # a multipart intersection keeps its largest piece as the lattice anchor;
    # the clip itself still uses the full intersection
    common_extent = max(common_regions, key=lambda r: r.area)
    rows = []
    for name, regions in products.items():
        clipped = _flatten_clip(regions, common)
        truth_c = _flatten_clip(truth, common)
        report = run_assessment(
            clipped, truth_c, common_extent, frame, circumradius=circumradius, fraction=fraction, seed=seed
        )
        rows.append((name, report))
    rows.sort(key=lambda kv: (-kv[1].f1, -kv[1].iou, kv[0]))
    return rows


def comparison_table(rows: Sequence[tuple[str, AssessmentReport]]) -> str:
    header = ("product", "precision", "recall", "f1", "iou")
    body = [
        (name, f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}", f"{r.iou:.4f}")
        for name, r in rows
    ]
    allrows = [header] + body
    widths = [max(len(row[i]) for row in allrows) for i in range(5)]
    return "\n".join("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in allrows)
