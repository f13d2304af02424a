"""Synthetic scene generation, corruption, IO, and oracle backends."""

import filecmp

import numpy as np
import pytest
import shapely

from uvkit.errors import InfeasiblePackingError, InputError
from uvkit.gateway import PromptPoint, RefineRequest, TileRequest
from uvkit.geomesh import Frame, mask_iou, rasterize, to_shapely
from uvkit.synthcity import (
    MIN_SEPARATION_M,
    PROB_INSIDE,
    PROB_OUTSIDE,
    Scene,
    SceneSpec,
    generate,
    load_scene,
    oracle_backends,
)

SMALL = SceneSpec(
    seed=5,
    extent_m=(768.0, 768.0),
    n_uv=4,
    uv_size_range_m2=(3_000.0, 6_000.0),
    boundary_noise=0.2,
    confuser_count=2,
)


@pytest.fixture(scope="module")
def scene() -> Scene:
    return generate(SMALL)


# ---------------------------------------------------------------------------
# geometry invariants
# ---------------------------------------------------------------------------


def test_scene_counts_and_containment(scene):
    assert len(scene.uv_regions) == 4
    assert len(scene.confusers) == 2
    gub = to_shapely(scene.gub)
    for region in scene.uv_regions + scene.confusers:
        assert gub.contains(to_shapely(region))


def test_regions_pairwise_separated(scene):
    shapes = [to_shapely(r) for r in scene.uv_regions + scene.confusers]
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            assert shapes[i].distance(shapes[j]) >= MIN_SEPARATION_M - 1e-6


def test_truth_mask_is_rasterized_regions(scene):
    want = rasterize(list(scene.uv_regions), scene.frame)
    assert np.array_equal(scene.truth_mask.data, want.data)


def test_city_record_view(scene):
    city = scene.city
    assert city.city_id == "synthcity-5"
    assert city.region_key == "Synthetic"
    assert len(city.uv_regions) == 4


def test_building_stocks_contrast(scene):
    uv_union = shapely.union_all([to_shapely(r) for r in scene.uv_regions])
    shapely.prepare(uv_union)
    uv_h, formal_h = [], []
    uv_area = formal_area = 0.0
    for b in scene.buildings:
        g = to_shapely(b.footprint)
        if uv_union.contains(g):
            uv_h.append(b.height_m)
            uv_area += g.area
        else:
            assert to_shapely(scene.gub).contains(g)
            assert not uv_union.intersects(g)
            formal_h.append(b.height_m)
            formal_area += g.area
    assert uv_h and formal_h
    assert max(uv_h) < min(formal_h)  # 6-15 m vs 25-80 m stocks
    # settlement stock is denser: covered fraction of its zone is higher
    zone_uv = uv_union.area
    zone_formal = to_shapely(scene.gub).area - zone_uv
    assert uv_area / zone_uv > formal_area / zone_formal


def test_spec_validation():
    with pytest.raises(InputError):
        SceneSpec(seed=0, extent_m=(0.0, 100.0))
    with pytest.raises(InputError):
        SceneSpec(seed=0, n_uv=-1)
    with pytest.raises(InputError):
        SceneSpec(seed=0, boundary_noise=1.5)
    with pytest.raises(InputError):
        SceneSpec(seed=0, uv_size_range_m2=(0.0, 10.0))
    with pytest.raises(InputError):
        generate(SceneSpec(seed=0, extent_m=(70.0, 70.0), n_uv=0, confuser_count=0))


def test_packing_failure_is_reported():
    impossible = SceneSpec(
        seed=1, extent_m=(300.0, 300.0), n_uv=12, uv_size_range_m2=(8_000.0, 20_000.0), confuser_count=0
    )
    with pytest.raises(InfeasiblePackingError):
        generate(impossible)


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------


def test_corrupt_zero_noise_is_identity(scene):
    clean = scene.corrupt(boundary_noise=0.0, confuser_count=0)
    assert np.array_equal(clean.data, scene.truth_mask.data)


def test_corrupt_default_degrades_but_overlaps(scene):
    iou = mask_iou(scene.corrupted_mask, scene.truth_mask)
    assert 0.5 < iou < 1.0


def test_corrupt_drop_all_leaves_only_decoys(scene):
    only_decoys = scene.corrupt(drop_fraction=1.0)
    conf = rasterize(list(scene.confusers), scene.frame).data.astype(bool)
    got = only_decoys.data.astype(bool)
    assert got.any()
    assert not (got & ~conf).any()  # decoy stripes only, nothing else
    # stripes are thin: strictly less than the full decoy footprint
    assert got.sum() < conf.sum()


def test_corrupt_variants_differ_and_repeat(scene):
    v0 = scene.corrupt(variant=0)
    v0_again = scene.corrupt(variant=0)
    v1 = scene.corrupt(variant=1)
    assert np.array_equal(v0.data, v0_again.data)
    assert not np.array_equal(v0.data, v1.data)


def test_corrupt_validation(scene):
    with pytest.raises(InputError):
        scene.corrupt(boundary_noise=2.0)
    with pytest.raises(InputError):
        scene.corrupt(drop_fraction=-0.1)
    with pytest.raises(InputError):
        scene.corrupt(confuser_count=99)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

SCENE_FILES = ["manifest.json", "truth.grid", "corrupted.grid", "image.grid", "city.geojson", "buildings.geojson"]


def test_write_is_deterministic(tmp_path, scene):
    a = tmp_path / "a"
    b = tmp_path / "b"
    scene.write(a)
    generate(SMALL).write(b)  # regenerated from scratch
    match, mismatch, errors = filecmp.cmpfiles(a, b, SCENE_FILES, shallow=False)
    assert mismatch == [] and errors == []
    assert sorted(match) == sorted(SCENE_FILES)


def test_load_scene_roundtrip(tmp_path, scene):
    where = tmp_path / "scene"
    scene.write(where)
    back = load_scene(where)
    assert back.spec == scene.spec
    assert back.frame == scene.frame
    assert np.array_equal(back.truth_mask.data, scene.truth_mask.data)
    assert np.array_equal(back.corrupted_mask.data, scene.corrupted_mask.data)
    assert len(back.uv_regions) == len(scene.uv_regions)
    for r1, r2 in zip(back.uv_regions, scene.uv_regions):
        assert np.array_equal(r1.exterior, r2.exterior)  # float-exact round trip
    assert len(back.buildings) == len(scene.buildings)
    assert back.buildings[0].height_m == scene.buildings[0].height_m
    # derived corruption replays identically from the loaded geometry
    assert np.array_equal(back.corrupt(variant=3).data, scene.corrupt(variant=3).data)
    # written again, the loaded scene reproduces the original bytes
    second = tmp_path / "rewrite"
    back.write(second)
    match, mismatch, errors = filecmp.cmpfiles(where, second, SCENE_FILES, shallow=False)
    assert mismatch == [] and errors == []


def test_load_scene_rejects_non_scene(tmp_path):
    with pytest.raises(InputError):
        load_scene(tmp_path)
    (tmp_path / "manifest.json").write_text('{"kind": "other"}')
    with pytest.raises(InputError):
        load_scene(tmp_path)


# ---------------------------------------------------------------------------
# oracle backends
# ---------------------------------------------------------------------------


def top_left_tile(scene, px=256):
    xmin, _, _, ymax = scene.frame.bounds()
    return Frame(px, px, (xmin, ymax), scene.frame.resolution)


def test_oracle_segmenter_probabilities(scene):
    segmenter, _, _ = oracle_backends(scene)
    frame = top_left_tile(scene)
    resp = segmenter.segment(TileRequest("t", frame))
    assert resp.backend_id == "rs-only"
    assert set(np.unique(resp.probabilities)) <= {PROB_INSIDE, PROB_OUTSIDE}
    from uvkit.geomesh import crop_to_frame

    crop = crop_to_frame(scene.corrupted_mask, frame).data
    assert np.array_equal(resp.probabilities > 0.5, crop > 0)
    with_vec = segmenter.segment(TileRequest("t", frame, vector_ref="v.json"))
    assert with_vec.backend_id == "multimodal"


def test_snapping_refiner_hits_and_misses(scene):
    _, refiner, _ = oracle_backends(scene)
    region = scene.uv_regions[0]
    from uvkit.geomesh import polygon_centroid

    cx, cy = polygon_centroid(region)
    hit = refiner.refine(
        RefineRequest("t", scene.frame, (PromptPoint(cx, cy, True),))
    )
    cand = hit.candidates[0]
    assert cand.confidence == 0.95
    assert np.array_equal(cand.mask.data, rasterize([region], scene.frame).data)

    miss = refiner.refine(RefineRequest("t", scene.frame, (PromptPoint(1.0, 1.0, True),)))
    assert miss.candidates[0].confidence == 0.5
    assert miss.candidates[0].mask.count() == 0

    echo_src = rasterize([region], scene.frame)
    echoed = refiner.refine(
        RefineRequest("t", scene.frame, (PromptPoint(1.0, 1.0, True),), mask=echo_src)
    )
    assert echoed.candidates[0].confidence == 0.5
    assert np.array_equal(echoed.candidates[0].mask.data, echo_src.data)


def test_geometry_hash_embedder(scene):
    from uvkit.geomesh import crop_to_frame
    from uvkit.sampler import GridCell

    _, _, embedder = oracle_backends(scene)
    xmin, ymin, xmax, ymax = scene.frame.bounds()

    def cell_at(x, y, size=128.0):
        return GridCell(0, (x, y, x + size, y + size))

    def truth_count(cell):
        frame = Frame(128, 128, (cell.bounds[0], cell.bounds[3]), 1.0)
        return int(crop_to_frame(scene.truth_mask, frame).count())

    empties = []
    occupied = None
    for gy in np.arange(ymin, ymax, 128.0):
        for gx in np.arange(xmin, xmax, 128.0):
            cell = cell_at(gx, gy)
            if truth_count(cell) == 0:
                empties.append(cell)
            else:
                occupied = cell
    assert len(empties) >= 2 and occupied is not None

    e0 = embedder.embed(empties[0]).values
    e1 = embedder.embed(empties[1]).values
    assert e0.shape == (16, 32)
    assert np.array_equal(e0, e1)  # content-keyed: identical content, identical matrix
    assert np.array_equal(e0, embedder.embed(empties[0]).values)
    assert not np.array_equal(e0, embedder.embed(occupied).values)
