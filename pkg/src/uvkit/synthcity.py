"""Deterministic synthetic cityscape generator.

Builds a planar scene with a built-up footprint, planted dense low-rise
settlement regions, industrial-decoy polygons, and two contrasting building
stocks; derives a corrupted prediction raster (boundary noise, striped decoy
false positives, optional region drops) and serves oracle backends so the
whole pipeline can be verified end to end without any real model.

All randomness is counter-based: every object draws from its own
`default_rng([seed, stream, index])`, so one object's parameters never shift
when another object is regenerated.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import shapely

from .analytics import BuildingRecord, CityRecord
from .errors import InfeasiblePackingError, InputError
from .gateway import (
    RefineCandidate,
    RefineRequest,
    RefineResponse,
    SegmentationResponse,
    TileRequest,
    route,
)
from .geomesh import (
    BinaryMask,
    Frame,
    RegionPolygon,
    crop_to_frame,
    point_in_polygon,
    polygon_centroid,
    rasterize,
    read_geojson,
    read_grid,
    regions_to_feature_collection,
    to_shapely,
    write_geojson,
    write_grid,
)
from .sampler import EmbeddingMatrix, GridCell

# rng stream ids, one per object family
_S_UV = 1
_S_CONFUSER = 2
_S_BLDG_UV = 3
_S_BLDG_FORMAL = 4
_S_CORRUPT = 5

GUB_INSET_M = 16.0
MIN_SEPARATION_M = 24.0
SCENE_EPSG = 3857  # any projected, meter-based CRS works; scenes are abstract
_PLACEMENT_TRIES = 200

# striped rendering of decoy false positives: 4 px bands on a 7 px period,
# thinner than a radius-3 opening can survive
_STRIPE_ON = 4
_STRIPE_PERIOD = 7

PROB_INSIDE = 0.95
PROB_OUTSIDE = 0.02


def _rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


@dataclass(frozen=True)
class BuildingDensity:
    """Two contrasting stocks: dense small low-rise inside planted regions,
    sparse large high-rise in the formal fabric."""

    uv_pitch_m: float = 12.0
    uv_size_m: tuple[float, float] = (7.0, 10.0)
    uv_height_m: tuple[float, float] = (6.0, 15.0)
    formal_pitch_m: float = 64.0
    formal_size_m: tuple[float, float] = (24.0, 40.0)
    formal_height_m: tuple[float, float] = (25.0, 80.0)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    extent_m: tuple[float, float] = (2048.0, 2048.0)
    n_uv: int = 25
    uv_size_range_m2: tuple[float, float] = (8000.0, 20000.0)
    boundary_noise: float = 0.2
    confuser_count: int = 5
    resolution_m: float = 1.0
    buildings: BuildingDensity = BuildingDensity()

    def __post_init__(self) -> None:
        w, h = self.extent_m
        if w <= 0 or h <= 0:
            raise InputError(f"extent must be positive, got {self.extent_m}")
        if self.n_uv < 0 or self.confuser_count < 0:
            raise InputError("object counts must be >= 0")
        lo, hi = self.uv_size_range_m2
        if not (0 < lo <= hi):
            raise InputError(f"bad size range {self.uv_size_range_m2}")
        if not (0.0 <= self.boundary_noise <= 1.0):
            raise InputError(f"boundary_noise must be in [0, 1], got {self.boundary_noise}")
        if self.resolution_m <= 0:
            raise InputError(f"resolution must be positive, got {self.resolution_m}")


def _star_polygon(
    rng: np.random.Generator,
    center: tuple[float, float],
    mean_radius: float,
    n_vertices: int,
    radius_jitter: float = 0.3,
) -> RegionPolygon:
    """Simple polygon star-shaped around `center`: strictly increasing vertex
    angles guarantee no self-intersection at any radial jitter."""
    k = n_vertices
    base = np.arange(k) * (2.0 * math.pi / k)
    ang = base + rng.uniform(-0.45, 0.45, k) * (math.pi / k)
    rad = mean_radius * (1.0 + rng.uniform(-radius_jitter, radius_jitter, k))
    xs = center[0] + rad * np.cos(ang)
    ys = center[1] + rad * np.sin(ang)
    return RegionPolygon(np.column_stack([xs, ys]))


def _place(
    seed: int,
    stream: int,
    count: int,
    radius_of: list[float],
    lo: tuple[float, float],
    hi: tuple[float, float],
    taken: list[tuple[float, float, float]],
    what: str,
) -> list[tuple[float, float]]:
    """Rejection placement with pairwise clearance; mutates `taken`."""
    centers = []
    for i in range(count):
        rng = _rng(seed, stream, i)
        r = radius_of[i]
        placed = False
        for _ in range(_PLACEMENT_TRIES):
            cx = rng.uniform(lo[0] + r, hi[0] - r)
            cy = rng.uniform(lo[1] + r, hi[1] - r)
            if all(
                math.hypot(cx - tx, cy - ty) >= r + tr + MIN_SEPARATION_M
                for tx, ty, tr in taken
            ):
                centers.append((cx, cy))
                taken.append((cx, cy, r))
                placed = True
                break
        if not placed:
            raise InfeasiblePackingError(
                f"could not place {what} {i + 1}/{count} after {_PLACEMENT_TRIES} tries; "
                "shrink counts or sizes, or enlarge the extent"
            )
    return centers


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    frame: Frame
    gub: RegionPolygon
    uv_regions: tuple[RegionPolygon, ...]
    confusers: tuple[RegionPolygon, ...]
    buildings: tuple[BuildingRecord, ...]
    truth_mask: BinaryMask
    corrupted_mask: BinaryMask

    @property
    def city(self) -> CityRecord:
        return CityRecord(
            city_id=f"synthcity-{self.spec.seed}",
            gub=self.gub,
            uv_regions=self.uv_regions,
            region_key="Synthetic",
        )

    def corrupt(
        self,
        boundary_noise: float | None = None,
        confuser_count: int | None = None,
        drop_fraction: float = 0.0,
        variant: int = 0,
    ) -> BinaryMask:
        """Derive a prediction raster from the truth geometry.

        Per region: an independent keep/drop draw, then per-vertex radial
        scaling about the region centroid by 1 + noise*U(-1,1), then
        re-rasterization. Decoys are stamped as 4 px stripe bands (7 px
        period), thin enough that standard preprocessing removes them.
        With noise 0, no drops, and no decoys the result is bit-identical
        to the truth raster (scaling by exactly 1 preserves every vertex)."""
        noise = self.spec.boundary_noise if boundary_noise is None else boundary_noise
        n_conf = self.spec.confuser_count if confuser_count is None else confuser_count
        if not (0.0 <= noise <= 1.0):
            raise InputError(f"boundary_noise must be in [0, 1], got {noise}")
        if not (0.0 <= drop_fraction <= 1.0):
            raise InputError(f"drop_fraction must be in [0, 1], got {drop_fraction}")
        if not (0 <= n_conf <= len(self.confusers)):
            raise InputError(
                f"confuser_count must be in [0, {len(self.confusers)}], got {n_conf}"
            )
        kept: list[RegionPolygon] = []
        for i, region in enumerate(self.uv_regions):
            rng = _rng(self.spec.seed, _S_CORRUPT, variant * 100_000 + i)
            if rng.uniform() < drop_fraction:
                continue
            ring = region.exterior
            cx, cy = polygon_centroid(region)
            factors = 1.0 + noise * rng.uniform(-1.0, 1.0, len(ring))
            moved = np.column_stack(
                [cx + (ring[:, 0] - cx) * factors, cy + (ring[:, 1] - cy) * factors]
            )
            kept.append(RegionPolygon(moved))
        out = (
            rasterize(kept, self.frame).data.copy()
            if kept
            else np.zeros(self.frame.shape, dtype=np.uint8)
        )
        if n_conf:
            stripes = (np.arange(self.frame.height) % _STRIPE_PERIOD) < _STRIPE_ON
            conf_raster = rasterize(list(self.confusers[:n_conf]), self.frame).data
            out |= conf_raster & stripes[:, None].astype(np.uint8)
        return BinaryMask(out, self.frame.origin, self.frame.resolution)

    def image_raster(self) -> BinaryMask:
        """Label-derived stand-in for imagery: the building footprints."""
        if not self.buildings:
            return self.frame.blank()
        return rasterize([b.footprint for b in self.buildings], self.frame)

    def write(self, out_dir: str | Path) -> Path:
        """Write the scene as plain files tied together by a manifest.

        All refs are relative and nothing carries a timestamp, so two writes
        of the same scene are bit-identical."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_grid(self.truth_mask, out / "truth.grid")
        write_grid(self.corrupted_mask, out / "corrupted.grid")
        write_grid(self.image_raster(), out / "image.grid")

        features: list[tuple[dict, list[RegionPolygon]]] = [
            ({"layer": "gub", "city_id": self.city.city_id, "region_key": "Synthetic"}, [self.gub])
        ]
        for i, region in enumerate(self.uv_regions):
            features.append(({"layer": "uv", "region_id": i}, [region]))
        for i, region in enumerate(self.confusers):
            features.append(({"layer": "confuser", "region_id": i}, [region]))
        write_geojson(regions_to_feature_collection(features, SCENE_EPSG), out / "city.geojson")

        bfeatures = [
            ({"height_m": b.height_m, "building_id": i}, [b.footprint])
            for i, b in enumerate(self.buildings)
        ]
        write_geojson(regions_to_feature_collection(bfeatures, SCENE_EPSG), out / "buildings.geojson")

        manifest = {
            "kind": "synthcity-scene",
            "spec": asdict(self.spec),
            "frame": {
                "width": self.frame.width,
                "height": self.frame.height,
                "origin": list(self.frame.origin),
                "resolution": self.frame.resolution,
            },
            "files": {
                "truth": "truth.grid",
                "corrupted": "corrupted.grid",
                "image": "image.grid",
                "city": "city.geojson",
                "buildings": "buildings.geojson",
            },
        }
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path


def generate(spec: SceneSpec) -> Scene:
    """Deterministically expand a spec into a full scene."""
    w, h = spec.extent_m
    res = spec.resolution_m
    width_px = int(round(w / res))
    height_px = int(round(h / res))
    frame = Frame(width_px, height_px, (0.0, h), res)

    inset = GUB_INSET_M
    if w <= 2 * inset + 2 * MIN_SEPARATION_M or h <= 2 * inset + 2 * MIN_SEPARATION_M:
        raise InputError(f"extent {spec.extent_m} too small for a usable scene")
    gub = RegionPolygon(
        np.array(
            [[inset, inset], [w - inset, inset], [w - inset, h - inset], [inset, h - inset]],
            dtype=np.float64,
        )
    )

    # planted regions: area drawn first so the packing radii are known up front
    uv_rngs = [_rng(spec.seed, _S_UV, i) for i in range(spec.n_uv)]
    areas = [r.uniform(*spec.uv_size_range_m2) for r in uv_rngs]
    mean_radii = [math.sqrt(a / math.pi) for a in areas]
    pack_radii = [r * 1.35 for r in mean_radii]  # jitter headroom
    taken: list[tuple[float, float, float]] = []
    lo = (inset + MIN_SEPARATION_M, inset + MIN_SEPARATION_M)
    hi = (w - inset - MIN_SEPARATION_M, h - inset - MIN_SEPARATION_M)
    uv_centers = _place(spec.seed, _S_UV + 100, spec.n_uv, pack_radii, lo, hi, taken, "region")
    uv_regions = tuple(
        _star_polygon(uv_rngs[i], uv_centers[i], mean_radii[i], int(uv_rngs[i].integers(14, 22)))
        for i in range(spec.n_uv)
    )

    conf_rngs = [_rng(spec.seed, _S_CONFUSER, i) for i in range(spec.confuser_count)]
    conf_radii = [r.uniform(30.0, 50.0) for r in conf_rngs]
    conf_centers = _place(
        spec.seed, _S_CONFUSER + 100, spec.confuser_count, [r * 1.5 for r in conf_radii], lo, hi, taken, "decoy"
    )
    confusers = []
    for i in range(spec.confuser_count):
        cw = conf_radii[i] * conf_rngs[i].uniform(1.4, 2.0)
        ch = conf_radii[i] * conf_rngs[i].uniform(0.9, 1.3)
        cx, cy = conf_centers[i]
        confusers.append(
            RegionPolygon(
                np.array(
                    [
                        [cx - cw / 2, cy - ch / 2],
                        [cx + cw / 2, cy - ch / 2],
                        [cx + cw / 2, cy + ch / 2],
                        [cx - cw / 2, cy + ch / 2],
                    ]
                )
            )
        )

    truth_mask = (
        rasterize(list(uv_regions), frame) if uv_regions else frame.blank()
    )

    buildings = _grow_buildings(spec, gub, uv_regions, tuple(confusers))

    scene = Scene(
        spec=spec,
        frame=frame,
        gub=gub,
        uv_regions=uv_regions,
        confusers=tuple(confusers),
        buildings=buildings,
        truth_mask=truth_mask,
        corrupted_mask=truth_mask,  # placeholder, replaced below
    )
    corrupted = scene.corrupt()
    return replace(scene, corrupted_mask=corrupted)


def _rect(cx: float, cy: float, w: float, h: float) -> RegionPolygon:
    return RegionPolygon(
        np.array(
            [[cx - w / 2, cy - h / 2], [cx + w / 2, cy - h / 2], [cx + w / 2, cy + h / 2], [cx - w / 2, cy + h / 2]]
        )
    )


def _grow_buildings(
    spec: SceneSpec,
    gub: RegionPolygon,
    uv_regions: tuple[RegionPolygon, ...],
    confusers: tuple[RegionPolygon, ...],
) -> tuple[BuildingRecord, ...]:
    """Jittered-grid fill of both zones. Every footprint lies wholly inside
    its zone, so zone statistics contrast by construction: the settlement
    stock is dense and low, the formal stock sparse and tall."""
    density = spec.buildings
    out: list[BuildingRecord] = []

    for i, region in enumerate(uv_regions):
        rng = _rng(spec.seed, _S_BLDG_UV, i)
        geom = to_shapely(region)
        shapely.prepare(geom)
        xmin, ymin, xmax, ymax = region.bounds()
        pitch = density.uv_pitch_m
        for gx in np.arange(xmin, xmax, pitch):
            for gy in np.arange(ymin, ymax, pitch):
                bw = rng.uniform(*density.uv_size_m)
                bh = rng.uniform(*density.uv_size_m)
                cx = gx + pitch / 2 + rng.uniform(-1.0, 1.0)
                cy = gy + pitch / 2 + rng.uniform(-1.0, 1.0)
                rect = _rect(cx, cy, bw, bh)
                if geom.contains(to_shapely(rect)):
                    out.append(BuildingRecord(rect, float(rng.uniform(*density.uv_height_m))))

    rng = _rng(spec.seed, _S_BLDG_FORMAL, 0)
    blockers = [to_shapely(r).buffer(6.0) for r in uv_regions]
    blockers += [to_shapely(c).buffer(6.0) for c in confusers]
    formal_zone = to_shapely(gub)
    if blockers:
        formal_zone = formal_zone.difference(shapely.union_all(blockers))
    shapely.prepare(formal_zone)
    xmin, ymin, xmax, ymax = gub.bounds()
    pitch = density.formal_pitch_m
    for gx in np.arange(xmin, xmax, pitch):
        for gy in np.arange(ymin, ymax, pitch):
            bw = rng.uniform(*density.formal_size_m)
            bh = rng.uniform(*density.formal_size_m)
            cx = gx + pitch / 2 + rng.uniform(-3.0, 3.0)
            cy = gy + pitch / 2 + rng.uniform(-3.0, 3.0)
            rect = _rect(cx, cy, bw, bh)
            if formal_zone.contains(to_shapely(rect)):
                out.append(BuildingRecord(rect, float(rng.uniform(*density.formal_height_m))))
    return tuple(out)


# ---------------------------------------------------------------------------
# scene IO
# ---------------------------------------------------------------------------


def load_scene(scene_dir: str | Path) -> Scene:
    """Rebuild a Scene from the files `Scene.write` produced. Geometry read
    from GeoJSON round-trips float-exactly, so `corrupt` variants derived
    from a loaded scene match ones derived from the original."""
    root = Path(scene_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise InputError(f"not a scene directory (no manifest.json): {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("kind") != "synthcity-scene":
        raise InputError(f"unrecognized manifest kind in {manifest_path}")
    spec_d = dict(manifest["spec"])
    spec_d["extent_m"] = tuple(spec_d["extent_m"])
    spec_d["uv_size_range_m2"] = tuple(spec_d["uv_size_range_m2"])
    bd = dict(spec_d["buildings"])
    for key in ("uv_size_m", "uv_height_m", "formal_size_m", "formal_height_m"):
        bd[key] = tuple(bd[key])
    spec_d["buildings"] = BuildingDensity(**bd)
    spec = SceneSpec(**spec_d)

    files = manifest["files"]
    truth = read_grid(root / files["truth"])
    corrupted = read_grid(root / files["corrupted"])

    city_fc, _ = read_geojson(root / files["city"])
    gub = None
    uvs: list[tuple[int, RegionPolygon]] = []
    confs: list[tuple[int, RegionPolygon]] = []
    for props, parts in city_fc:
        layer = props.get("layer")
        if layer == "gub":
            gub = parts[0]
        elif layer == "uv":
            uvs.append((int(props["region_id"]), parts[0]))
        elif layer == "confuser":
            confs.append((int(props["region_id"]), parts[0]))
    if gub is None:
        raise InputError(f"{files['city']} lacks a gub-layer feature")
    uvs.sort(key=lambda t: t[0])
    confs.sort(key=lambda t: t[0])

    bld_fc, _ = read_geojson(root / files["buildings"])
    buildings = []
    for props, parts in sorted(bld_fc, key=lambda pf: int(pf[0].get("building_id", 0))):
        buildings.append(BuildingRecord(parts[0], float(props["height_m"])))

    return Scene(
        spec=spec,
        frame=truth.frame,
        gub=gub,
        uv_regions=tuple(r for _, r in uvs),
        confusers=tuple(r for _, r in confs),
        buildings=tuple(buildings),
        truth_mask=truth,
        corrupted_mask=corrupted,
    )


# ---------------------------------------------------------------------------
# oracle backends
# ---------------------------------------------------------------------------


def _crop(mask: BinaryMask, frame: Frame) -> np.ndarray:
    """Aligned crop of a scene raster onto a tile frame."""
    return crop_to_frame(mask, frame).data


class OracleSegmenter:
    """Emits the scene's corrupted prediction as probabilities."""

    def __init__(self, scene: Scene) -> None:
        self._scene = scene

    def segment(self, req: TileRequest) -> SegmentationResponse:
        crop = _crop(self._scene.corrupted_mask, req.frame)
        probs = np.where(crop > 0, PROB_INSIDE, PROB_OUTSIDE).astype(np.float64)
        return SegmentationResponse(
            tile_id=req.tile_id,
            probabilities=probs,
            backend_id=route(req.vector_context_present),
        )


class SnappingRefiner:
    """Returns the true region(s) containing any positive prompt point with
    confidence 0.95; otherwise echoes the mask prompt (or a blank mask) with
    confidence 0.5."""

    def __init__(self, scene: Scene) -> None:
        self._scene = scene

    def refine(self, req: RefineRequest) -> RefineResponse:
        hits = []
        for region in self._scene.uv_regions:
            if any(point_in_polygon(p.x, p.y, region) for p in req.points if p.positive):
                hits.append(region)
        if hits:
            mask = rasterize(hits, req.frame)
            candidate = RefineCandidate(mask=mask, confidence=0.95)
        else:
            echoed = req.mask if req.mask is not None else req.frame.blank()
            candidate = RefineCandidate(mask=echoed, confidence=0.5)
        return RefineResponse(
            tile_id=req.tile_id, candidates=(candidate,), backend_id="oracle-snap"
        )


class GeometryHashEmbedder:
    """Deterministic embedding keyed by the truth content of the cell:
    identical planted content gives the identical matrix."""

    def __init__(self, scene: Scene, rows: int = 16, dim: int = 32) -> None:
        self._scene = scene
        self._rows = rows
        self._dim = dim

    def embed(self, cell: GridCell) -> EmbeddingMatrix:
        xmin, ymin, xmax, ymax = cell.bounds
        res = self._scene.frame.resolution
        tile = Frame(
            int(round((xmax - xmin) / res)), int(round((ymax - ymin) / res)), (xmin, ymax), res
        )
        crop = _crop(self._scene.truth_mask, tile)
        digest = hashlib.sha256(crop.shape[0].to_bytes(4, "big") + crop.tobytes()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        values = rng.standard_normal((self._rows, self._dim))
        return EmbeddingMatrix(values)


def oracle_backends(scene: Scene) -> tuple[OracleSegmenter, SnappingRefiner, GeometryHashEmbedder]:
    """In-process backend handles for the whole pipeline."""
    return (OracleSegmenter(scene), SnappingRefiner(scene), GeometryHashEmbedder(scene))
