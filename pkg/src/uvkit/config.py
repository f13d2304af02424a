"""Pipeline configuration: one flat JSON document with validated keys.

Defaults encode the workflow's operating points (512 m sampling grid, 256 px
training crops, 1024 px refinement tiles, 0.6/0.7 escalation floors, 15%
assessment sampling, loss smoothing 1e-7 and overlap weight 0.01). A config
is hashable (sha256 of its canonical JSON) so run manifests can prove two
runs used identical settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Sequence

from .errors import ConfigError


@dataclass(frozen=True)
class PipelineConfig:
    # sampling stage
    grid_size_m: float = 512.0
    train_tile_px: int = 256
    top_frac: float = 0.05
    band_low: float = 0.10
    band_high: float = 0.30
    # refinement stage
    refine_tile_px: int = 1024
    open_radius_px: int = 3
    min_area_px: int = 1000
    rdp_max_vertices: int = 12
    offset_min_px: float = 3.0
    offset_clearance_frac: float = 0.1
    confidence_floor: float = 0.6
    iou_floor: float = 0.7
    prob_threshold: float = 0.5
    # assessment stage
    hex_circumradius_m: float = 500.0
    sample_fraction: float = 0.15
    min_overlap_frac: float = 0.0
    # loss math
    loss_mu: float = 1e-7
    loss_epsilon: float = 0.01
    prob_clamp: float = 1e-7
    # backends
    backend_uri: str | None = None
    timeout_s: float = 60.0
    retries: int = 2
    backoff_base_s: float = 0.5
    # seeds
    seed: int = 0
    sample_seed: int = 0

    def __post_init__(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.grid_size_m > 0, f"grid_size_m must be > 0, got {self.grid_size_m}")
        need(
            self.train_tile_px in (256, 1024),
            f"train_tile_px must be 256 or 1024, got {self.train_tile_px}",
        )
        need(
            self.refine_tile_px in (256, 1024),
            f"refine_tile_px must be 256 or 1024, got {self.refine_tile_px}",
        )
        need(
            0.0 < self.top_frac < self.band_low < self.band_high <= 1.0,
            "need 0 < top_frac < band_low < band_high <= 1, got "
            f"{self.top_frac}/{self.band_low}/{self.band_high}",
        )
        need(self.open_radius_px >= 0, f"open_radius_px must be >= 0, got {self.open_radius_px}")
        need(self.min_area_px >= 0, f"min_area_px must be >= 0, got {self.min_area_px}")
        need(self.rdp_max_vertices >= 3, f"rdp_max_vertices must be >= 3, got {self.rdp_max_vertices}")
        need(self.offset_min_px > 0, f"offset_min_px must be > 0, got {self.offset_min_px}")
        need(
            self.offset_clearance_frac >= 0,
            f"offset_clearance_frac must be >= 0, got {self.offset_clearance_frac}",
        )
        for name in ("confidence_floor", "iou_floor", "prob_threshold"):
            value = getattr(self, name)
            need(0.0 <= value <= 1.0, f"{name} must be in [0, 1], got {value}")
        need(self.hex_circumradius_m > 0, f"hex_circumradius_m must be > 0, got {self.hex_circumradius_m}")
        need(
            0.0 < self.sample_fraction <= 1.0,
            f"sample_fraction must be in (0, 1], got {self.sample_fraction}",
        )
        need(
            0.0 <= self.min_overlap_frac < 1.0,
            f"min_overlap_frac must be in [0, 1), got {self.min_overlap_frac}",
        )
        need(self.loss_mu > 0, f"loss_mu must be > 0, got {self.loss_mu}")
        need(self.loss_epsilon >= 0, f"loss_epsilon must be >= 0, got {self.loss_epsilon}")
        need(0.0 < self.prob_clamp < 0.5, f"prob_clamp must be in (0, 0.5), got {self.prob_clamp}")
        need(self.timeout_s > 0, f"timeout_s must be > 0, got {self.timeout_s}")
        need(self.retries >= 0, f"retries must be >= 0, got {self.retries}")
        need(self.backoff_base_s >= 0, f"backoff_base_s must be >= 0, got {self.backoff_base_s}")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def field_names(cls) -> frozenset[str]:
        return frozenset(f.name for f in fields(cls))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
        unknown = sorted(set(data) - cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad config value types: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def with_overrides(self, overrides: Sequence[str]) -> "PipelineConfig":
        """Apply `key=value` strings; values parse as JSON, falling back to a
        bare string (so `backend_uri=python3 srv.py` needs no quoting)."""
        updates: dict[str, Any] = {}
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key = key.strip()
            if key not in self.field_names():
                raise ConfigError(f"unknown config key(s): {key}")
            try:
                updates[key] = json.loads(raw)
            except json.JSONDecodeError:
                updates[key] = raw
        return replace(self, **updates)
