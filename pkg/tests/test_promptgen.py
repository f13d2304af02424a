"""Prompt placement validity, escalation rule, and tile refinement flow."""

import numpy as np
import pytest
import shapely
from shapely.geometry import Point

from uvkit.errors import BackendTransportError, InputError
from uvkit.gateway import CallPolicy, RefineCandidate, RefineResponse
from uvkit.geomesh import BinaryMask, connected_components, to_shapely
from uvkit.promptgen import (
    decide_mask_prompt,
    generate_prompts,
    preprocess,
    refine_tile,
)

FAST = CallPolicy(timeout_s=5.0, retries=0, backoff_base_s=0.0)


def blob_mask(h=64, w=64, centers=((32, 32),), radius=8):
    yy, xx = np.mgrid[0:h, 0:w]
    data = np.zeros((h, w), np.uint8)
    for r, c in centers:
        data |= ((yy - r) ** 2 + (xx - c) ** 2 <= radius**2).astype(np.uint8)
    return BinaryMask(data, (0.0, float(h)), 1.0)


# ---------------------------------------------------------------------------
# escalation rule
# ---------------------------------------------------------------------------


def test_decide_mask_prompt_truth_table():
    cases = {
        (0.55, 0.95): True,  # confidence below floor
        (0.90, 0.65): True,  # agreement below floor
        (0.90, 0.90): False,
        (0.60, 0.70): False,  # exactly at both floors: no escalation
    }
    for (conf, iou), want in cases.items():
        assert decide_mask_prompt(conf, iou) is want, (conf, iou)


def test_decide_mask_prompt_custom_floors_equality_does_not_fire():
    assert decide_mask_prompt(0.8, 0.9, confidence_floor=0.8, iou_floor=0.9) is False
    assert decide_mask_prompt(0.8 - 1e-9, 0.9, 0.8, 0.9) is True
    assert decide_mask_prompt(0.8, 0.9 - 1e-9, 0.8, 0.9) is True


# ---------------------------------------------------------------------------
# prompt generation
# ---------------------------------------------------------------------------


def region_union(mask):
    from uvkit.geomesh import vectorize

    return shapely.unary_union([to_shapely(p) for p in vectorize(mask)])


def test_prompts_positive_inside_negative_outside():
    rng = np.random.default_rng(11)
    for _ in range(25):
        r = int(rng.integers(6, 14))
        cy = int(rng.integers(r + 4, 64 - r - 4))
        cx = int(rng.integers(r + 4, 64 - r - 4))
        region = blob_mask(centers=((cy, cx),), radius=r)
        ps = generate_prompts(region, max_vertices=12)
        from uvkit.geomesh import vectorize

        main = max((to_shapely(p) for p in vectorize(region)), key=lambda g: g.area)
        positives = [p for p in ps.points if p.positive]
        negatives = [p for p in ps.points if not p.positive]
        assert positives, "at least the anchor point"
        for p in positives:
            assert main.contains(Point(p.x, p.y))
        for p in negatives:
            assert not main.intersects(Point(p.x, p.y))


def test_negative_prompts_avoid_other_regions_too():
    both = blob_mask(centers=((20, 20), (44, 44)), radius=9)
    comps = connected_components(both)
    region = comps.component_mask(1)
    ps = generate_prompts(region, exclusion=both)
    union = region_union(both)
    for p in ps.points:
        if not p.positive:
            assert not union.intersects(Point(p.x, p.y))


def test_prompt_budget_and_anchor_first():
    region = blob_mask(radius=12)
    ps = generate_prompts(region, max_vertices=8)
    assert ps.points[0].positive  # anchor leads
    assert len(ps.points) <= 1 + 2 * 8
    assert ps.region_id == 0


def test_prompts_deterministic_and_floors_carried():
    region = blob_mask(radius=10)
    a = generate_prompts(region, confidence_floor=0.7, iou_floor=0.8)
    b = generate_prompts(region, confidence_floor=0.7, iou_floor=0.8)
    assert a.points == b.points
    assert a.confidence_floor == 0.7 and a.iou_floor == 0.8


def test_generate_prompts_rejects_empty_region():
    empty = blob_mask(centers=())
    with pytest.raises(InputError):
        generate_prompts(empty)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def test_preprocess_drops_specks_and_keeps_clean_regions():
    mask = blob_mask(centers=((20, 20), (45, 45)), radius=8)
    dirty = mask.data.copy()
    dirty[2, 2] = 1  # single-pixel speck
    dirty[60, 5:8] = 1  # thin 3-px strand: opening at radius 1 removes it
    comps = preprocess(BinaryMask(dirty, mask.origin, mask.resolution), open_radius=1, min_area=20)
    assert comps.count == 2
    clean = connected_components(mask)
    # opening a round blob at radius 1 erodes nothing that changes the count
    assert comps.count == clean.count


def test_preprocess_is_idempotent():
    mask = blob_mask(centers=((20, 20), (45, 45)), radius=8)
    first = preprocess(mask, open_radius=1, min_area=20)
    cleaned = BinaryMask((first.labels > 0).astype(np.uint8), mask.origin, mask.resolution)
    second = preprocess(cleaned, open_radius=1, min_area=20)
    assert np.array_equal(first.labels, second.labels)
    assert np.array_equal(first.areas, second.areas)


# ---------------------------------------------------------------------------
# tile refinement
# ---------------------------------------------------------------------------


class SnapRefiner:
    """Returns the component of a reference mask containing the anchor point.
    Confidence differs between point-only and mask-prompted calls."""

    backend_id = "snap"

    def __init__(self, reference, first_conf=0.95, mask_conf=0.95):
        self.comps = connected_components(reference)
        self.first_conf = first_conf
        self.mask_conf = mask_conf
        self.requests = []

    def refine(self, request):
        self.requests.append(request)
        anchor = request.points[0]
        row, col = request.frame.pixel_of(anchor.x, anchor.y)
        label = int(self.comps.labels[row, col])
        mask = self.comps.component_mask(label)
        conf = self.mask_conf if request.mask is not None else self.first_conf
        return RefineResponse(request.tile_id, (RefineCandidate(mask, conf),), self.backend_id)


class FailingRefiner:
    backend_id = "dead"

    def refine(self, request):
        raise BackendTransportError("offline")


def two_blob_tile():
    return blob_mask(centers=((18, 18), (46, 46)), radius=8)


def cleaned_of(mask, open_radius=1, min_area=20):
    comps = preprocess(mask, open_radius=open_radius, min_area=min_area)
    return BinaryMask((comps.labels > 0).astype(np.uint8), mask.origin, mask.resolution)


def test_refine_tile_happy_path():
    initial = two_blob_tile()
    refiner = SnapRefiner(cleaned_of(initial))
    result = refine_tile(initial, refiner, tile_id="t", open_radius=1, min_area=20, policy=FAST)
    assert result.backend_calls == 2
    assert len(result.outcomes) == 2
    for outcome in result.outcomes:
        assert not outcome.fallback and not outcome.used_mask_prompt
        assert outcome.confidence == 0.95
        assert outcome.iou_vs_initial == pytest.approx(1.0)
    comps = preprocess(initial, open_radius=1, min_area=20)
    assert np.array_equal(result.mask.data, (comps.labels > 0).astype(np.uint8))
    assert [r.tile_id for r in refiner.requests] == ["t/1", "t/2"]
    assert all(r.mask is None for r in refiner.requests)


def test_refine_tile_low_confidence_escalates_to_mask_prompt():
    initial = blob_mask(radius=10)
    refiner = SnapRefiner(cleaned_of(initial), first_conf=0.5, mask_conf=0.95)
    result = refine_tile(initial, refiner, tile_id="t", open_radius=1, min_area=20, policy=FAST)
    assert result.backend_calls == 2
    (outcome,) = result.outcomes
    assert outcome.used_mask_prompt and not outcome.fallback
    assert outcome.confidence == 0.95
    assert [r.tile_id for r in refiner.requests] == ["t/1", "t/1+mask"]
    assert refiner.requests[0].mask is None
    assert refiner.requests[1].mask is not None


def test_refine_tile_low_agreement_escalates():
    initial = blob_mask(radius=10)

    class Dilating(SnapRefiner):
        def refine(self, request):
            resp = super().refine(request)
            if request.mask is not None:
                return resp
            from scipy import ndimage

            grown = ndimage.binary_dilation(
                resp.candidates[0].mask.data.astype(bool), iterations=3
            )
            mask = BinaryMask(grown.astype(np.uint8), initial.origin, initial.resolution)
            return RefineResponse(request.tile_id, (RefineCandidate(mask, 0.9),), "snap")

    refiner = Dilating(cleaned_of(initial))
    result = refine_tile(initial, refiner, tile_id="t", open_radius=1, min_area=20, policy=FAST)
    (outcome,) = result.outcomes
    assert outcome.used_mask_prompt  # IoU of the bloated first answer fell below 0.7
    assert outcome.iou_vs_initial == pytest.approx(1.0)  # second call snapped back


def test_refine_tile_backend_failure_falls_back():
    initial = two_blob_tile()
    result = refine_tile(initial, FailingRefiner(), tile_id="t", open_radius=1, min_area=20, policy=FAST)
    assert result.backend_calls == 2  # one attempted call per region
    comps = preprocess(initial, open_radius=1, min_area=20)
    for outcome in result.outcomes:
        assert outcome.fallback
        assert outcome.confidence == 0.0
        assert outcome.iou_vs_initial == 1.0
        assert np.array_equal(
            outcome.mask.data, comps.component_mask(outcome.region_id).data
        )
    assert np.array_equal(result.mask.data, (comps.labels > 0).astype(np.uint8))


def test_refine_tile_empty_mask_short_circuits():
    empty = blob_mask(centers=())
    result = refine_tile(empty, FailingRefiner(), policy=FAST)
    assert result.backend_calls == 0
    assert result.outcomes == ()
    assert result.mask.count() == 0


def test_refine_tile_jobs_parity():
    initial = blob_mask(centers=((14, 14), (14, 48), (48, 30)), radius=7)
    serial = refine_tile(initial, SnapRefiner(cleaned_of(initial)), open_radius=1, min_area=20, policy=FAST)
    threaded = refine_tile(
        initial, SnapRefiner(cleaned_of(initial)), open_radius=1, min_area=20, policy=FAST, jobs=4
    )
    assert np.array_equal(serial.mask.data, threaded.mask.data)
    assert serial.backend_calls == threaded.backend_calls
    for a, b in zip(serial.outcomes, threaded.outcomes):
        assert (a.region_id, a.confidence, a.iou_vs_initial) == (
            b.region_id,
            b.confidence,
            b.iou_vs_initial,
        )
        assert np.array_equal(a.mask.data, b.mask.data)
