"""Command-line front end: every pipeline stage as a subcommand.

Stages compose through files. `synth` plants a labeled city; `tile` and
`sample-rank` expose the training-data plumbing; `infer` segments tiles
through a backend and stitches a probability raster; `refine` turns an
initial mask into per-region prompted refinements; `assess`, `compare`,
and `analyze` score and summarize the results; `loss-check` exercises the
gradient suite.

Exit codes: 0 success, 1 input/config error, 2 backend failure (a hard
segmentation failure, or refinement fallbacks exceeding the budget).

Every writing subcommand drops a `run.json` next to its outputs recording
the command, the config hash, input digests, and seeds. Nothing written
here carries a timestamp, so identical runs produce identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import shapely

from .analytics import CSV_COLUMNS, analyze_cities
from .assess import compare_products, comparison_table, run_assessment
from .config import PipelineConfig
from .errors import BackendError, InputError, UvkitError
from .gateway import CallPolicy, TileRequest, open_wire_backend, segment
from .gateway import embed as embed_cell
from .geomesh import (
    BinaryMask,
    Frame,
    RegionPolygon,
    crop_to_frame,
    read_grid,
    read_geojson,
    to_shapely,
    vectorize,
    write_grid,
    write_prob_grid,
)
from .lossmath import LossConfig, MaskPair, bce, dice, gradient_check
from .promptgen import preprocess, refine_tile
from .sampler import (
    CellStatus,
    SimilarityScore,
    crop_training_tiles,
    grid_cells,
    rank_and_band,
    similarity,
)
from .synthcity import SceneSpec, generate, load_scene, oracle_backends


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad arguments; our contract reserves 2 for backend
    failures, so usage errors are remapped to 1."""

    def error(self, message: str):  # noqa: ANN202 - argparse API
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_options(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="FILE", help="JSON config file (defaults otherwise)")
    sub.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        dest="overrides",
        help="override one config key; repeatable",
    )
    sub.add_argument(
        "--format", choices=("json", "table"), default="table", help="report style on stdout"
    )
    sub.add_argument("--jobs", type=int, default=1, help="worker threads for backend calls")


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.overrides:
        cfg = cfg.with_overrides(args.overrides)
    return cfg


def _policy(cfg: PipelineConfig) -> CallPolicy:
    return CallPolicy(timeout_s=cfg.timeout_s, retries=cfg.retries, backoff_base_s=cfg.backoff_base_s)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(
    out_dir: Path,
    command: str,
    cfg: PipelineConfig,
    inputs: dict[str, Path],
    outputs: list[str],
    seeds: dict[str, int],
) -> None:
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash,
        "inputs": {name: _sha256(p) for name, p in sorted(inputs.items())},
        "outputs": sorted(outputs),
        "seeds": dict(sorted(seeds.items())),
    }
    with open(out_dir / "run.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _scene_inputs(scene_dir: Path) -> dict[str, Path]:
    """Digestable inputs of a scene: its manifest plus every file it lists."""
    manifest = scene_dir / "manifest.json"
    if not manifest.is_file():
        raise InputError(f"{scene_dir} has no manifest.json")
    files = json.loads(manifest.read_text(encoding="utf-8")).get("files", {})
    inputs = {"manifest.json": manifest}
    for name in files.values():
        inputs[name] = scene_dir / name
    return inputs


def _bbox_region(bounds: tuple[float, float, float, float]) -> RegionPolygon:
    xmin, ymin, xmax, ymax = bounds
    return RegionPolygon(((xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)))


def _load_regions(path: str | Path, layer: str | None = None):
    """Read a prediction/truth file.

    Returns (regions, frame, extent_hint): frame comes from .grid inputs,
    extent_hint from a GeoJSON `gub` layer when one exists. GeoJSON defaults
    to the `uv` layer if present, all features otherwise."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"input file not found: {p}")
    if p.suffix == ".grid":
        mask = read_grid(p)
        return vectorize(mask), mask.frame, None
    if p.suffix in (".geojson", ".json"):
        feats, _ = read_geojson(p)
        layers = {props.get("layer") for props, _ in feats}
        want = layer if layer is not None else ("uv" if "uv" in layers else None)
        regions = []
        gub_parts = []
        for props, parts in feats:
            if props.get("layer") == "gub":
                gub_parts.extend(parts)
            if want is None or props.get("layer") == want:
                regions.append((props, parts))
        flat = [part for _, parts in regions for part in parts]
        hint = None
        if gub_parts:
            # multipart boundary: the largest part anchors the extent
            hint = max(gub_parts, key=lambda r: r.area)
        return flat, None, hint
    raise InputError(f"unsupported input format: {p} (want .grid or .geojson)")


def _parse_extent(raw: str) -> RegionPolygon:
    parts = raw.split(",")
    if len(parts) == 4:
        try:
            xmin, ymin, xmax, ymax = (float(v) for v in parts)
        except ValueError:
            raise InputError(f"bad extent {raw!r}: want xmin,ymin,xmax,ymax") from None
        if xmax <= xmin or ymax <= ymin:
            raise InputError(f"empty extent {raw!r}")
        return _bbox_region((xmin, ymin, xmax, ymax))
    _, _, hint = _load_regions(raw, layer="gub")
    if hint is None:
        raise InputError(f"extent file {raw} has no gub layer")
    return hint


def _frame_for(extent: RegionPolygon, resolution: float) -> Frame:
    xmin, ymin, xmax, ymax = extent.bounds()
    width = int(math.ceil((xmax - xmin) / resolution))
    height = int(math.ceil((ymax - ymin) / resolution))
    return Frame(width, height, (xmin, ymin + height * resolution), resolution)


def _resolve_eval_inputs(args: argparse.Namespace):
    """Common input resolution for assess/compare-style commands: regions,
    an extent polygon, and a raster frame for the pixel counts."""
    predicted, pframe, phint = _load_regions(args.predicted, args.layer)
    truth, tframe, thint = _load_regions(args.truth, args.layer)
    if pframe is not None and tframe is not None and pframe != tframe:
        # both rasters must describe the same window
        from .errors import FrameMismatchError

        raise FrameMismatchError(f"predicted frame {pframe} != truth frame {tframe}")
    frame = pframe or tframe
    if args.extent:
        extent = _parse_extent(args.extent)
    elif thint is not None:
        extent = thint
    elif phint is not None:
        extent = phint
    elif frame is not None:
        extent = _bbox_region(frame.bounds())
    else:
        raise InputError("no extent: pass --extent or use inputs that carry one")
    if frame is None:
        frame = _frame_for(extent, args.resolution)
    return predicted, truth, extent, frame


def _tile_frames(frame: Frame, tile_px: int, overlap: int):
    """Square tile windows covering the frame; stride = tile - overlap.

    The frame must admit an exact cover (first tile at 0, last flush with the
    far edge), which keeps every request a full tile."""
    if overlap < 0 or overlap >= tile_px:
        raise InputError(f"overlap must be in [0, {tile_px}), got {overlap}")
    stride = tile_px - overlap
    for size, name in ((frame.width, "width"), (frame.height, "height")):
        if size < tile_px:
            raise InputError(f"frame {name} {size} px is smaller than the {tile_px} px tile")
        if (size - tile_px) % stride != 0:
            raise InputError(
                f"frame {name} {size} px does not tile: ({size} - {tile_px}) "
                f"must be a multiple of the {stride} px stride"
            )
    ox, oy = frame.origin
    res = frame.resolution
    for r0 in range(0, frame.height - tile_px + 1, stride):
        for c0 in range(0, frame.width - tile_px + 1, stride):
            sub = Frame(tile_px, tile_px, (ox + c0 * res, oy - r0 * res), res)
            yield r0, c0, sub


def _resolve_segmenter(args: argparse.Namespace, cfg: PipelineConfig, scene):
    """Pick the oracle bundled with a scene or a wire backend by URI."""
    choice = args.backend
    if choice is None:
        choice = "oracle" if scene is not None else (cfg.backend_uri or "env")
    if choice == "oracle":
        if scene is None:
            raise InputError("--backend oracle needs --scene")
        return oracle_backends(scene)
    uri = None if choice == "env" else choice
    wire = open_wire_backend(uri, timeout_s=cfg.timeout_s)
    return wire, wire, wire


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    extent = tuple(float(v) for v in args.extent.split("x"))
    if len(extent) != 2:
        raise InputError(f"bad --extent {args.extent!r}: want WIDTHxHEIGHT in meters")
    spec = SceneSpec(
        seed=cfg.seed if args.seed is None else args.seed,
        extent_m=extent,
        n_uv=args.n_uv,
        boundary_noise=args.noise,
        confuser_count=args.confusers,
    )
    scene = generate(spec)
    out = Path(args.out)
    manifest = scene.write(out)
    files = json.loads(manifest.read_text(encoding="utf-8"))["files"]
    _write_run_manifest(
        out, "synth", cfg, inputs={}, outputs=sorted(files.values()) + ["manifest.json"],
        seeds={"scene_seed": spec.seed},
    )
    print(f"scene written to {out} ({len(scene.uv_regions)} regions, seed {spec.seed})")
    return 0


def _cmd_tile(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    scene_dir = Path(args.scene)
    scene = load_scene(scene_dir)
    cells = grid_cells(scene.frame.bounds(), cfg.grid_size_m)
    shapes = [to_shapely(r) for r in scene.uv_regions]
    labeled = []
    for cell in cells:
        box = shapely.box(*cell.bounds)
        hit = tuple(
            scene.uv_regions[i] for i, s in enumerate(shapes) if s.intersection(box).area > 0
        )
        status = CellStatus.POSITIVE if hit else CellStatus.NEGATIVE
        labeled.append(replace(cell, status=status, annotations=hit))
    out = Path(args.out)
    manifest = crop_training_tiles(
        labeled, out, tile_px=cfg.train_tile_px, resolution=scene.frame.resolution
    )
    outputs = [entry["label_ref"] for entry in manifest["tiles"]] + ["tiles.json"]
    _write_run_manifest(
        out, "tile", cfg, inputs=_scene_inputs(scene_dir), outputs=outputs, seeds={}
    )
    positives = sum(1 for e in manifest["tiles"] if e["positive"])
    print(f"{len(manifest['tiles'])} tiles from {len(cells)} cells ({positives} positive)")
    return 0


def _cmd_sample_rank(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    scene_dir = Path(args.scene)
    scene = load_scene(scene_dir)
    cells = grid_cells(scene.frame.bounds(), cfg.grid_size_m)
    ids = {c.cell_id for c in cells}
    anchors = sorted(set(args.anchor))
    missing = [a for a in anchors if a not in ids]
    if missing:
        raise InputError(f"anchor cell(s) {missing} not in 0..{len(cells) - 1}")
    _, _, embedder = _resolve_segmenter(args, cfg, scene)
    policy = _policy(cfg)

    def one(cell):
        return embed_cell(cell, embedder, policy)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            matrices = list(pool.map(one, cells))
    else:
        matrices = [one(c) for c in cells]
    by_id = {c.cell_id: m for c, m in zip(cells, matrices)}
    anchor_ms = [by_id[a] for a in anchors]
    anchor_set = set(anchors)
    scores = [
        SimilarityScore(cell_id=c.cell_id, alpha_sim=similarity(by_id[c.cell_id], anchor_ms))
        for c in cells
        if c.cell_id not in anchor_set
    ]
    confusion, diversity = rank_and_band(scores, cfg.top_frac, (cfg.band_low, cfg.band_high))

    def rows(band):
        return [
            {"cell_id": s.cell_id, "alpha_sim": s.alpha_sim, "rank": s.rank} for s in band
        ]

    doc = {
        "anchors": anchors,
        "cells_scored": len(scores),
        "confusion": rows(confusion),
        "diversity": rows(diversity),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ranking.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_run_manifest(
        out, "sample-rank", cfg, inputs=_scene_inputs(scene_dir),
        outputs=["ranking.json"], seeds={},
    )
    print(
        f"{len(scores)} cells scored: {len(confusion)} confusion, "
        f"{len(diversity)} diversity (ranking.json)"
    )
    return 0


def _cmd_infer(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    scene = None
    inputs: dict[str, Path] = {}
    if args.scene:
        scene = load_scene(args.scene)
        frame = scene.frame
        image_ref = str(Path(args.scene) / "image.grid")
        inputs.update(_scene_inputs(Path(args.scene)))
    elif args.image:
        image = read_grid(args.image)
        frame = image.frame
        image_ref = str(args.image)
        inputs["image"] = Path(args.image)
    else:
        raise InputError("infer needs --scene or --image")
    segmenter, _, _ = _resolve_segmenter(args, cfg, scene)
    policy = _policy(cfg)
    tiles = list(_tile_frames(frame, cfg.refine_tile_px, args.overlap))

    def one(job):
        r0, c0, sub = job
        req = TileRequest(tile_id=f"t{r0}_{c0}", frame=sub, image_ref=image_ref)
        return segment(req, segmenter, policy)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            responses = list(pool.map(one, tiles))
    else:
        responses = [one(t) for t in tiles]

    # stitch: mean probability, majority vote on the thresholded tiles
    # (ties count as positive, matching the >= threshold convention)
    prob_sum = np.zeros(frame.shape, dtype=np.float64)
    cover = np.zeros(frame.shape, dtype=np.int32)
    votes = np.zeros(frame.shape, dtype=np.int32)
    t = cfg.refine_tile_px
    for (r0, c0, _), resp in zip(tiles, responses):
        window = (slice(r0, r0 + t), slice(c0, c0 + t))
        prob_sum[window] += resp.probabilities
        cover[window] += 1
        votes[window] += (resp.probabilities >= cfg.prob_threshold).astype(np.int32)
    probs = (prob_sum / cover).astype(np.float32)
    mask = BinaryMask((2 * votes >= cover).astype(np.uint8), frame.origin, frame.resolution)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_prob_grid(probs, frame, out / "predicted.pgrid")
    write_grid(mask, out / "predicted.grid")
    _write_run_manifest(
        out, "infer", cfg, inputs=inputs,
        outputs=["predicted.pgrid", "predicted.grid"], seeds={},
    )
    print(f"{len(tiles)} tiles inferred -> {out / 'predicted.grid'}")
    return 0


def _cmd_refine(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    initial = read_grid(args.initial)
    frame = initial.frame
    inputs: dict[str, Path] = {"initial": Path(args.initial)}
    scene = None
    image_ref = None
    if args.scene:
        scene = load_scene(args.scene)
        image_ref = str(Path(args.scene) / "image.grid")
        inputs.update(_scene_inputs(Path(args.scene)))
    refiner = None
    if not args.preprocess_only:
        _, refiner, _ = _resolve_segmenter(args, cfg, scene)
    policy = _policy(cfg)

    merged = np.zeros(frame.shape, dtype=np.uint8)
    t = cfg.refine_tile_px
    log_tiles = []
    total_regions = 0
    fallbacks = 0
    calls = 0
    for r0, c0, sub in _tile_frames(frame, t, 0):
        crop = crop_to_frame(initial, sub)
        tile_id = f"t{r0}_{c0}"
        if args.preprocess_only:
            comps = preprocess(crop, cfg.open_radius_px, cfg.min_area_px)
            tile_mask = BinaryMask(
                (comps.labels > 0).astype(np.uint8), sub.origin, sub.resolution
            )
            entry = {"tile_id": tile_id, "backend_calls": 0, "regions": []}
        else:
            result = refine_tile(
                crop,
                refiner,
                tile_id=tile_id,
                image_ref=image_ref,
                open_radius=cfg.open_radius_px,
                min_area=cfg.min_area_px,
                max_vertices=cfg.rdp_max_vertices,
                policy=policy,
                confidence_floor=cfg.confidence_floor,
                iou_floor=cfg.iou_floor,
                offset_min_px=cfg.offset_min_px,
                offset_clearance_frac=cfg.offset_clearance_frac,
                jobs=args.jobs,
            )
            tile_mask = result.mask
            calls += result.backend_calls
            total_regions += len(result.outcomes)
            fallbacks += sum(1 for o in result.outcomes if o.fallback)
            entry = {
                "tile_id": tile_id,
                "backend_calls": result.backend_calls,
                "regions": [
                    {
                        "region_id": o.region_id,
                        "confidence": o.confidence,
                        "iou_vs_initial": o.iou_vs_initial,
                        "used_mask_prompt": o.used_mask_prompt,
                        "fallback": o.fallback,
                    }
                    for o in result.outcomes
                ],
            }
        merged[r0 : r0 + t, c0 : c0 + t] = tile_mask.data
        log_tiles.append(entry)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    refined = BinaryMask(merged, frame.origin, frame.resolution)
    write_grid(refined, out / "refined.grid")
    fallback_fraction = fallbacks / total_regions if total_regions else 0.0
    log = {
        "mode": "preprocess-only" if args.preprocess_only else "refine",
        "backend_calls": calls,
        "fallback_fraction": fallback_fraction,
        "tiles": log_tiles,
    }
    with open(out / "refine_log.json", "w", encoding="utf-8") as fh:
        json.dump(log, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_run_manifest(
        out, "refine", cfg, inputs=inputs,
        outputs=["refined.grid", "refine_log.json"], seeds={},
    )
    print(
        f"{total_regions} regions refined, {fallbacks} fallbacks "
        f"({calls} backend calls) -> {out / 'refined.grid'}"
    )
    if fallback_fraction > args.max_fallback_frac:
        print(
            f"error: fallback fraction {fallback_fraction:.3f} exceeds "
            f"budget {args.max_fallback_frac}",
            file=sys.stderr,
        )
        return 2
    return 0


def _cmd_assess(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    predicted, truth, extent, frame = _resolve_eval_inputs(args)
    report = run_assessment(
        predicted,
        truth,
        extent,
        frame,
        circumradius=cfg.hex_circumradius_m,
        fraction=cfg.sample_fraction,
        seed=cfg.sample_seed,
        min_overlap_frac=cfg.min_overlap_frac,
    )
    print(report.to_json() if args.format == "json" else report.to_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
        _write_run_manifest(
            out, "assess", cfg,
            inputs={"predicted": Path(args.predicted), "truth": Path(args.truth)},
            outputs=["report.json"], seeds={"sample_seed": cfg.sample_seed},
        )
    return 0


def _cmd_compare(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    products = {}
    footprints = {}
    for item in args.product:
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise InputError(f"bad --product {item!r}: want NAME=FILE")
        if name in products:
            raise InputError(f"duplicate product name {name!r}")
        regions, pframe, phint = _load_regions(path, args.layer)
        products[name] = regions
        if phint is not None:
            footprints[name] = phint
        elif pframe is not None:
            footprints[name] = _bbox_region(pframe.bounds())
    truth, tframe, thint = _load_regions(args.truth, args.layer)
    if args.extent:
        extent = _parse_extent(args.extent)
    elif thint is not None:
        extent = thint
    elif tframe is not None:
        extent = _bbox_region(tframe.bounds())
    else:
        raise InputError("no extent: pass --extent or use inputs that carry one")
    frame = tframe or _frame_for(extent, args.resolution)
    rows = compare_products(
        products,
        truth,
        extent,
        frame,
        footprints=footprints or None,
        circumradius=cfg.hex_circumradius_m,
        fraction=cfg.sample_fraction,
        seed=cfg.sample_seed,
    )
    if args.format == "json":
        doc = [{"name": name, "report": json.loads(rep.to_json())} for name, rep in rows]
        print(json.dumps(doc, sort_keys=True, indent=2))
    else:
        print(comparison_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = [{"name": name, "report": json.loads(rep.to_json())} for name, rep in rows]
        with open(out / "comparison.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")
        inputs = {"truth": Path(args.truth)}
        for item in args.product:
            name, _, path = item.partition("=")
            inputs[f"product:{name}"] = Path(path)
        _write_run_manifest(
            out, "compare", cfg, inputs=inputs,
            outputs=["comparison.json"], seeds={"sample_seed": cfg.sample_seed},
        )
    return 0


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _cmd_analyze(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    cities = []
    buildings = {}
    inputs: dict[str, Path] = {}
    for scene_dir in args.scene:
        scene = load_scene(scene_dir)
        city = scene.city
        cities.append(city)
        buildings[city.city_id] = scene.buildings
        for name, path in _scene_inputs(Path(scene_dir)).items():
            inputs[f"{Path(scene_dir).name}/{name}"] = path
    rows, summary = analyze_cities(cities, buildings, precision=args.precision)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cities.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(getattr(row, col)) for col in CSV_COLUMNS) + "\n")
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_run_manifest(
        out, "analyze", cfg, inputs=inputs,
        outputs=["cities.csv", "summary.json"], seeds={},
    )
    if args.format == "json":
        print(json.dumps(summary, sort_keys=True, indent=2))
    else:
        print(f"{summary['cities']} cities -> {out / 'cities.csv'}")
        print(
            f"mean proportion {summary['mean_proportion']:.4f}, "
            f"mean periphery index {summary['mean_periphery_index']:.4f}, "
            f"patterns {summary['pattern_counts']}"
        )
    return 0


def _cmd_loss_check(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    lcfg = LossConfig(
        clamp=cfg.prob_clamp, smoothing=cfg.loss_mu, overlap_weight=cfg.loss_epsilon
    )
    checks = []

    value, _ = bce(MaskPair(np.array([[1.0]]), np.array([[0.5]]), clamp=lcfg.clamp))
    checks.append(("bce(y=1, p=0.5) = ln 2", abs(value - math.log(2.0)), 1e-9))

    pair = MaskPair(
        np.array([1.0, 1.0, 0.0, 0.0]), np.array([1.0, 0.0, 1.0, 0.0]), clamp=lcfg.clamp
    )
    value, _ = dice(pair, lcfg.smoothing)
    checks.append(("dice(half overlap) = 0.5", abs(value - 0.5), 1e-6))

    worst = gradient_check(pairs=args.pairs, side=32, seed=cfg.seed, config=lcfg)
    for name in ("bce", "dice", "combined"):
        checks.append((f"finite-difference {name} gradient", worst[name], args.rel_tol))

    failed = 0
    for name, err, tol in checks:
        ok = err <= tol
        failed += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'}  {name}  (error {err:.3e}, tolerance {tol:.0e})")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="uvkit", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--print-defaults",
        action="store_true",
        help="print the default config as JSON and exit",
    )
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = subs.add_parser("synth", help="generate a labeled synthetic city scene")
    _common_options(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=None, help="scene seed (default: config seed)")
    p.add_argument("--n-uv", type=int, default=25, help="planted regions")
    p.add_argument("--noise", type=float, default=0.2, help="boundary corruption amplitude")
    p.add_argument("--confusers", type=int, default=5, help="confuser structures")
    p.add_argument("--extent", default="2048x2048", help="scene size in meters, WxH")
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser("tile", help="cut per-cell training label tiles from a scene")
    _common_options(p)
    p.add_argument("--scene", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=_cmd_tile)

    p = subs.add_parser("sample-rank", help="embed grid cells and rank by anchor similarity")
    _common_options(p)
    p.add_argument("--scene", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument(
        "--anchor",
        type=int,
        action="append",
        required=True,
        help="anchor cell id; repeatable",
    )
    p.add_argument("--backend", default=None, help='"oracle" (default) or a wire URI')
    p.set_defaults(func=_cmd_sample_rank)

    p = subs.add_parser("infer", help="segment tiles through a backend and stitch")
    _common_options(p)
    p.add_argument("--scene", metavar="DIR", help="scene directory (oracle backend input)")
    p.add_argument("--image", metavar="FILE", help="image raster for wire backends")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--backend", default=None, help='"oracle" (default with --scene) or a wire URI')
    p.add_argument(
        "--overlap",
        type=int,
        default=0,
        help="tile overlap in px; overlapped pixels decide by majority vote",
    )
    p.set_defaults(func=_cmd_infer)

    p = subs.add_parser("refine", help="prompt-refine every region of an initial mask")
    _common_options(p)
    p.add_argument("--in", dest="initial", required=True, metavar="FILE", help="initial .grid mask")
    p.add_argument("--scene", metavar="DIR", help="scene directory (oracle refiner)")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--backend", default=None, help='"oracle" (default with --scene) or a wire URI')
    p.add_argument(
        "--preprocess-only",
        action="store_true",
        help="skip refinement: opening + small-region removal only",
    )
    p.add_argument(
        "--max-fallback-frac",
        type=float,
        default=0.5,
        help="exit 2 when more than this fraction of regions fall back",
    )
    p.set_defaults(func=_cmd_refine)

    p = subs.add_parser("assess", help="hex-sampled accuracy of predicted vs truth regions")
    _common_options(p)
    p.add_argument("--predicted", required=True, metavar="FILE")
    p.add_argument("--truth", required=True, metavar="FILE")
    p.add_argument("--extent", metavar="BBOX|FILE", help="xmin,ymin,xmax,ymax or a gub GeoJSON")
    p.add_argument("--layer", default=None, help="GeoJSON layer to read (default: uv)")
    p.add_argument("--resolution", type=float, default=1.0, help="m/px when no raster input")
    p.add_argument("--out", metavar="DIR", help="also write report.json + run.json here")
    p.set_defaults(func=_cmd_assess)

    p = subs.add_parser("compare", help="rank several products against one truth set")
    _common_options(p)
    p.add_argument(
        "--product",
        action="append",
        required=True,
        metavar="NAME=FILE",
        help="product to score; repeat for each",
    )
    p.add_argument("--truth", required=True, metavar="FILE")
    p.add_argument("--extent", metavar="BBOX|FILE")
    p.add_argument("--layer", default=None)
    p.add_argument("--resolution", type=float, default=1.0)
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=_cmd_compare)

    p = subs.add_parser("analyze", help="cross-city statistics over scene directories")
    _common_options(p)
    p.add_argument("--scene", action="append", required=True, metavar="DIR", help="repeatable")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--precision", type=float, default=1.0, help="clearance search precision (m)")
    p.set_defaults(func=_cmd_analyze)

    p = subs.add_parser("loss-check", help="verify loss values and gradients")
    _common_options(p)
    p.add_argument("--pairs", type=int, default=100, help="random mask pairs to test")
    p.add_argument("--rel-tol", type=float, default=1e-4, help="gradient tolerance")
    p.set_defaults(func=_cmd_loss_check)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        sys.stdout.write(PipelineConfig().to_json())
        return 0
    if getattr(args, "func", None) is None:
        parser.error("a subcommand is required (or --print-defaults)")
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UvkitError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
