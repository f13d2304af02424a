"""Prompt construction and mask refinement around a promptable segmenter.

For each cleaned region the generator plants one positive anchor (centroid,
or the pole of inaccessibility when the centroid falls outside), then walks
the simplified outline and offsets every surviving vertex along its inward
bisector: the inward copy becomes a positive point if it lands inside the
region, the outward copy a negative point if it lands outside every region.
Ambiguous candidates too close to a boundary are discarded rather than
guessed. Low-confidence or low-agreement responses escalate to a second call
that re-sends the points plus the region mask as a dense prompt.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import BackendError, InputError
from .gateway import (
    CallPolicy,
    PromptPoint,
    RefineRequest,
    Refiner,
    best_candidate,
    refine as gateway_refine,
)
from .geomesh import (
    BinaryMask,
    LabeledComponents,
    RegionPolygon,
    connected_components,
    distance_to_boundary,
    drop_small_components,
    mask_iou,
    morphological_open,
    point_in_polygon,
    pole_of_inaccessibility,
    polygon_centroid,
    simplify_ring,
    vectorize,
)

log = logging.getLogger(__name__)

DEFAULT_CONFIDENCE_FLOOR = 0.6
DEFAULT_IOU_FLOOR = 0.7
DEFAULT_MAX_VERTICES = 12
DEFAULT_OFFSET_MIN_PX = 3.0
DEFAULT_OFFSET_CLEARANCE_FRAC = 0.1
# a candidate closer than this (in pixels) to any region boundary is dropped
_BOUNDARY_MARGIN_PX = 0.05


@dataclass(frozen=True)
class PromptSet:
    """Prompts for one region, plus the thresholds the escalation rule uses."""

    region_id: int
    points: tuple[PromptPoint, ...]
    mask_prompt: BinaryMask | None = None
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR
    iou_floor: float = DEFAULT_IOU_FLOOR


@dataclass(frozen=True)
class RefinementOutcome:
    region_id: int
    confidence: float
    iou_vs_initial: float  # recomputed locally, never trusted from the backend
    used_mask_prompt: bool
    fallback: bool
    mask: BinaryMask | None


@dataclass(frozen=True)
class TileRefinement:
    mask: BinaryMask
    outcomes: tuple[RefinementOutcome, ...]
    backend_calls: int


def preprocess(mask: BinaryMask, open_radius: int = 3, min_area: int = 1000) -> LabeledComponents:
    """Morphological opening followed by small-component removal; returns the
    surviving 4-connected regions. Already-clean masks come through unchanged."""
    cleaned = drop_small_components(morphological_open(mask, open_radius), min_area)
    return connected_components(cleaned)


def decide_mask_prompt(confidence: float, iou_vs_initial: float,
                       confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
                       iou_floor: float = DEFAULT_IOU_FLOOR) -> bool:
    """Escalate iff confidence < floor OR agreement < floor (both strict, so
    values exactly at a floor do not fire)."""
    return confidence < confidence_floor or iou_vs_initial < iou_floor


def _inward_normals(ring: np.ndarray) -> np.ndarray:
    """Unit inward bisector at each vertex of a counter-clockwise ring: the
    normalized sum of the two adjacent edges' left normals."""
    prev = np.roll(ring, 1, axis=0)
    nxt = np.roll(ring, -1, axis=0)
    d_in = ring - prev
    d_out = nxt - ring
    d_in /= np.linalg.norm(d_in, axis=1, keepdims=True)
    d_out /= np.linalg.norm(d_out, axis=1, keepdims=True)
    # left normal of (x, y) is (-y, x); interior lies left of a CCW boundary
    left_in = np.column_stack([-d_in[:, 1], d_in[:, 0]])
    left_out = np.column_stack([-d_out[:, 1], d_out[:, 0]])
    bis = left_in + left_out
    norms = np.linalg.norm(bis, axis=1, keepdims=True)
    # a 180-degree spike has opposite normals; fall back to the outgoing one
    degenerate = norms[:, 0] < 1e-12
    bis[degenerate] = left_out[degenerate]
    norms = np.linalg.norm(bis, axis=1, keepdims=True)
    return bis / norms


def _simplify_to_budget(ring: np.ndarray, max_vertices: int, resolution: float) -> np.ndarray:
    """Double epsilon from one pixel until the ring fits the vertex budget."""
    eps = resolution
    out = simplify_ring(ring, eps)
    while len(out) > max_vertices:
        eps *= 2.0
        out = simplify_ring(ring, eps)
    return out


def generate_prompts(
    region: BinaryMask,
    max_vertices: int = DEFAULT_MAX_VERTICES,
    offset: float | None = None,
    region_id: int = 0,
    exclusion: BinaryMask | None = None,
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
    iou_floor: float = DEFAULT_IOU_FLOOR,
    offset_min_px: float = DEFAULT_OFFSET_MIN_PX,
    offset_clearance_frac: float = DEFAULT_OFFSET_CLEARANCE_FRAC,
) -> PromptSet:
    """Build point prompts for one region mask.

    `exclusion` is the full preprocessed mask (all regions); outward negative
    candidates must clear every region in it, not just this one. When offset
    is None it defaults to max(offset_min_px pixels, offset_clearance_frac
    times the interior clearance)."""
    if region.count() == 0:
        raise InputError("cannot prompt an empty region")
    polys = vectorize(region)
    main = max(polys, key=lambda p: p.area)
    res = region.resolution
    pia_point, clearance = pole_of_inaccessibility(main, precision=res)
    if offset is None:
        offset = max(offset_min_px * res, offset_clearance_frac * clearance)

    margin = _BOUNDARY_MARGIN_PX * res
    points: list[PromptPoint] = []

    cx, cy = polygon_centroid(main)
    if point_in_polygon(cx, cy, main) and distance_to_boundary((cx, cy), main) > margin:
        points.append(PromptPoint(cx, cy, True))
    else:
        points.append(PromptPoint(pia_point[0], pia_point[1], True))

    exclusion = exclusion or region
    # distance to the nearest foreground pixel, in pixels, for outward checks
    outside_clear = ndimage.distance_transform_edt(~exclusion.data.astype(bool))

    ring = _simplify_to_budget(main.exterior, max_vertices, res)
    normals = _inward_normals(ring)
    frame = region.frame
    xmin_f, ymin_f, xmax_f, ymax_f = frame.bounds()
    for (vx, vy), (nx, ny) in zip(ring, normals):
        ix, iy = vx + offset * nx, vy + offset * ny
        if point_in_polygon(ix, iy, main) and distance_to_boundary((ix, iy), main) > margin:
            points.append(PromptPoint(ix, iy, True))
        ox_, oy_ = vx - offset * nx, vy - offset * ny
        if not (xmin_f <= ox_ < xmax_f and ymin_f < oy_ <= ymax_f):
            continue
        row, col = frame.pixel_of(ox_, oy_)
        row = min(max(row, 0), frame.height - 1)
        col = min(max(col, 0), frame.width - 1)
        # >= 1.5 px from every foreground pixel center means the point clears
        # every region polygon by at least half a pixel
        if outside_clear[row, col] >= 1.5:
            points.append(PromptPoint(ox_, oy_, False))

    return PromptSet(
        region_id=region_id,
        points=tuple(points),
        mask_prompt=None,
        confidence_floor=confidence_floor,
        iou_floor=iou_floor,
    )


def _refine_one_region(
    region_id: int,
    region_mask: BinaryMask,
    full_mask: BinaryMask,
    refiner: Refiner,
    tile_id: str,
    image_ref: str | None,
    max_vertices: int,
    offset: float | None,
    policy: CallPolicy,
    confidence_floor: float,
    iou_floor: float,
    offset_min_px: float,
    offset_clearance_frac: float,
) -> tuple[RefinementOutcome, int]:
    calls = 0
    try:
        prompts = generate_prompts(
            region_mask,
            max_vertices=max_vertices,
            offset=offset,
            region_id=region_id,
            exclusion=full_mask,
            confidence_floor=confidence_floor,
            iou_floor=iou_floor,
            offset_min_px=offset_min_px,
            offset_clearance_frac=offset_clearance_frac,
        )
        request = RefineRequest(
            tile_id=f"{tile_id}/{region_id}",
            frame=region_mask.frame,
            points=prompts.points,
            mask=None,
            image_ref=image_ref,
        )
        calls += 1
        response = gateway_refine(request, refiner, policy)
        cand = best_candidate(response)
        confidence = cand.confidence
        refined = cand.mask
        iou0 = mask_iou(refined, region_mask)
        used_mask = False
        if decide_mask_prompt(confidence, iou0, confidence_floor, iou_floor):
            used_mask = True
            second = RefineRequest(
                tile_id=f"{tile_id}/{region_id}+mask",
                frame=region_mask.frame,
                points=prompts.points,
                mask=region_mask,
                image_ref=image_ref,
            )
            calls += 1
            response = gateway_refine(second, refiner, policy)
            cand = best_candidate(response)
            confidence = cand.confidence
            refined = cand.mask
            iou0 = mask_iou(refined, region_mask)
        return (
            RefinementOutcome(region_id, confidence, iou0, used_mask, False, refined),
            calls,
        )
    except BackendError as exc:
        log.warning("tile %s region %d: refinement failed (%s); keeping preprocessed mask", tile_id, region_id, exc)
        return RefinementOutcome(region_id, 0.0, 1.0, False, True, region_mask), calls


def refine_tile(
    initial: BinaryMask,
    refiner: Refiner,
    tile_id: str = "tile",
    image_ref: str | None = None,
    open_radius: int = 3,
    min_area: int = 1000,
    max_vertices: int = DEFAULT_MAX_VERTICES,
    offset: float | None = None,
    policy: CallPolicy | None = None,
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
    iou_floor: float = DEFAULT_IOU_FLOOR,
    offset_min_px: float = DEFAULT_OFFSET_MIN_PX,
    offset_clearance_frac: float = DEFAULT_OFFSET_CLEARANCE_FRAC,
    jobs: int = 1,
) -> TileRefinement:
    """Refine every region of an initial mask and merge the results by union.

    Regions are processed independently (optionally in parallel; the union
    merge is order-independent). A region whose backend calls fail falls back
    to its preprocessed mask and is flagged in its outcome. An empty initial
    mask returns an empty tile with zero backend calls."""
    policy = policy or CallPolicy()
    comps = preprocess(initial, open_radius=open_radius, min_area=min_area)
    frame = initial.frame
    if comps.count == 0:
        return TileRefinement(frame.blank(), (), 0)
    cleaned = BinaryMask((comps.labels > 0).astype(np.uint8), frame.origin, frame.resolution)

    def work(label: int):
        return _refine_one_region(
            label,
            comps.component_mask(label),
            cleaned,
            refiner,
            tile_id,
            image_ref,
            max_vertices,
            offset,
            policy,
            confidence_floor,
            iou_floor,
            offset_min_px,
            offset_clearance_frac,
        )

    labels = list(range(1, comps.count + 1))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, labels))
    else:
        results = [work(label) for label in labels]

    merged = np.zeros(frame.shape, dtype=bool)
    outcomes = []
    total_calls = 0
    for outcome, calls in results:
        total_calls += calls
        outcomes.append(outcome)
        if outcome.mask is not None:
            merged |= outcome.mask.data.astype(bool)
    outcomes.sort(key=lambda o: o.region_id)
    return TileRefinement(
        BinaryMask(merged.astype(np.uint8), frame.origin, frame.resolution),
        tuple(outcomes),
        total_calls,
    )
