"""Uniform access to segmentation, embedding, and refinement backends.

Every call crosses a policy envelope: payload validation on the way out and
back, a per-call timeout, and deterministic exponential-backoff retries for
transport failures (malformed responses are not retried; they raise
BackendResponseError immediately). In-process backends are plain objects with
segment/embed/refine methods; remote backends speak line-delimited JSON over
a subprocess pipe or HTTP POST, with rasters passed by file reference:

  request : {"op": "segment"|"embed"|"refine", "tile_id": ..., "image_ref": ...,
             "vector_ref": ..., "prompts": [{"x": ..., "y": ..., "label": 1|0}],
             "mask_ref": ..., "bounds": [x0, y0, x1, y1]}
  response: {"tile_id": ..., "grid_ref": ..., "confidence": ..., "backend_id": ...}
            refine responses may instead carry "candidates":
            [{"grid_ref": ..., "confidence": ...}, ...]
  errors  : {"tile_id": ..., "error": "..."}

The env var UVKIT_BACKEND_URI supplies the default remote URI: values starting
with http:// or https:// use HTTP POST, anything else is run as a subprocess
command line.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .errors import BackendResponseError, BackendTransportError, InputError
from .geomesh import BinaryMask, Frame, read_grid, read_prob_grid, write_grid
from .sampler import EmbeddingMatrix, GridCell

log = logging.getLogger(__name__)

ENV_BACKEND_URI = "UVKIT_BACKEND_URI"


# ---------------------------------------------------------------------------
# request / response shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TileRequest:
    """One segmentation call. Tiles are square: 256 px (training-crop scale)
    or 1024 px (refinement scale)."""

    tile_id: str
    frame: Frame
    image_ref: str | None = None
    vector_ref: str | None = None

    def __post_init__(self) -> None:
        if self.frame.width != self.frame.height or self.frame.width not in (256, 1024):
            raise InputError(
                "tile frame must be square, 256 or 1024 px, "
                f"got {self.frame.width}x{self.frame.height}"
            )

    @property
    def tile_size(self) -> int:
        return self.frame.width

    @property
    def vector_context_present(self) -> bool:
        return self.vector_ref is not None


@dataclass(frozen=True)
class SegmentationResponse:
    tile_id: str
    probabilities: np.ndarray  # (h, w) float in [0, 1]
    backend_id: str


@dataclass(frozen=True)
class PromptPoint:
    x: float
    y: float
    positive: bool


@dataclass(frozen=True)
class RefineRequest:
    tile_id: str
    frame: Frame
    points: tuple[PromptPoint, ...]
    mask: BinaryMask | None = None
    image_ref: str | None = None


@dataclass(frozen=True)
class RefineCandidate:
    mask: BinaryMask
    confidence: float


@dataclass(frozen=True)
class RefineResponse:
    tile_id: str
    candidates: tuple[RefineCandidate, ...]
    backend_id: str


def best_candidate(response: RefineResponse) -> RefineCandidate:
    """Highest confidence wins; ties keep the earliest candidate."""
    best = response.candidates[0]
    for cand in response.candidates[1:]:
        if cand.confidence > best.confidence:
            best = cand
    return best


class SegmentationBackend(Protocol):
    backend_id: str

    def segment(self, request: TileRequest) -> SegmentationResponse: ...


class EmbeddingProvider(Protocol):
    backend_id: str

    def embed(self, cell: GridCell) -> EmbeddingMatrix: ...


class Refiner(Protocol):
    backend_id: str

    def refine(self, request: RefineRequest) -> RefineResponse: ...


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------


def route(vector_context_present: bool) -> str:
    """Pick the model family for a tile: joint image+vector inference when
    vector context exists, image-only inference otherwise."""
    return "multimodal" if vector_context_present else "rs-only"


# ---------------------------------------------------------------------------
# policy envelope
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CallPolicy:
    timeout_s: float = 60.0
    retries: int = 2
    backoff_base_s: float = 0.5  # sleep backoff_base * 2^attempt; no jitter, so
    # a fixed failure script yields a fixed call sequence

    def __post_init__(self) -> None:
        if self.timeout_s <= 0 or self.retries < 0 or self.backoff_base_s < 0:
            raise InputError(f"invalid call policy {self}")


def _call_with_policy(fn: Callable[[], object], policy: CallPolicy, tile_id: str):
    last: BackendTransportError | None = None
    for attempt in range(policy.retries + 1):
        try:
            return fn()
        except BackendTransportError as exc:
            last = exc
            if attempt < policy.retries:
                delay = policy.backoff_base_s * (2**attempt)
                log.warning("tile %s: transport failure (%s), retry %d after %.2fs", tile_id, exc, attempt + 1, delay)
                if delay > 0:
                    time.sleep(delay)
    raise BackendTransportError(
        f"tile {tile_id}: backend unreachable after {policy.retries + 1} attempts: {last}", tile_id=tile_id
    )


def _validate_probabilities(probs: np.ndarray, frame: Frame, tile_id: str) -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64)
    if arr.shape != frame.shape:
        raise BackendResponseError(
            f"tile {tile_id}: probability grid shape {arr.shape} != tile shape {frame.shape}", tile_id=tile_id
        )
    if not np.isfinite(arr).all():
        raise BackendResponseError(f"tile {tile_id}: probability grid contains non-finite values", tile_id=tile_id)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise BackendResponseError(f"tile {tile_id}: probabilities outside [0, 1]", tile_id=tile_id)
    return arr


def _validate_refine(response: RefineResponse, frame: Frame, tile_id: str) -> RefineResponse:
    if not response.candidates:
        raise BackendResponseError(f"tile {tile_id}: refine response carries no candidates", tile_id=tile_id)
    for cand in response.candidates:
        if cand.mask.frame != frame:
            raise BackendResponseError(
                f"tile {tile_id}: candidate frame {cand.mask.frame} != tile frame {frame}", tile_id=tile_id
            )
        if not (0.0 <= cand.confidence <= 1.0) or not np.isfinite(cand.confidence):
            raise BackendResponseError(
                f"tile {tile_id}: confidence {cand.confidence} outside [0, 1]", tile_id=tile_id
            )
    if not response.backend_id:
        raise BackendResponseError(f"tile {tile_id}: empty backend_id", tile_id=tile_id)
    return response


def segment(request: TileRequest, backend: SegmentationBackend, policy: CallPolicy | None = None) -> SegmentationResponse:
    """Segment one tile through the policy envelope. Deterministic backends
    make the call idempotent for a given (tile_id, backend_id)."""
    policy = policy or CallPolicy()
    response = _call_with_policy(lambda: backend.segment(request), policy, request.tile_id)
    if not isinstance(response, SegmentationResponse):
        raise BackendResponseError(f"tile {request.tile_id}: backend returned {type(response).__name__}")
    probs = _validate_probabilities(response.probabilities, request.frame, request.tile_id)
    if not response.backend_id:
        raise BackendResponseError(f"tile {request.tile_id}: empty backend_id", tile_id=request.tile_id)
    return SegmentationResponse(response.tile_id, probs, response.backend_id)


def embed(cell: GridCell, provider: EmbeddingProvider, policy: CallPolicy | None = None) -> EmbeddingMatrix:
    policy = policy or CallPolicy()
    matrix = _call_with_policy(lambda: provider.embed(cell), policy, str(cell.cell_id))
    if not isinstance(matrix, EmbeddingMatrix):
        try:
            matrix = EmbeddingMatrix(np.asarray(matrix))
        except Exception as exc:
            raise BackendResponseError(f"cell {cell.cell_id}: bad embedding payload ({exc})") from exc
    return matrix


def refine(request: RefineRequest, refiner: Refiner, policy: CallPolicy | None = None) -> RefineResponse:
    policy = policy or CallPolicy()
    response = _call_with_policy(lambda: refiner.refine(request), policy, request.tile_id)
    if not isinstance(response, RefineResponse):
        raise BackendResponseError(f"tile {request.tile_id}: refiner returned {type(response).__name__}")
    return _validate_refine(response, request.frame, request.tile_id)


# ---------------------------------------------------------------------------
# wire transports
# ---------------------------------------------------------------------------


def _encode_request(op: str, request, workdir: Path) -> dict:
    if op == "segment":
        msg = {"op": "segment", "tile_id": request.tile_id, "image_ref": request.image_ref}
        if request.vector_ref is not None:
            msg["vector_ref"] = request.vector_ref
        f = request.frame
        msg["frame"] = [f.width, f.height, f.origin[0], f.origin[1], f.resolution]
        return msg
    if op == "embed":
        cell: GridCell = request
        return {"op": "embed", "tile_id": str(cell.cell_id), "bounds": list(cell.bounds)}
    if op == "refine":
        msg = {
            "op": "refine",
            "tile_id": request.tile_id,
            "image_ref": request.image_ref,
            "prompts": [{"x": p.x, "y": p.y, "label": 1 if p.positive else 0} for p in request.points],
        }
        f = request.frame
        msg["frame"] = [f.width, f.height, f.origin[0], f.origin[1], f.resolution]
        if request.mask is not None:
            ref = workdir / f"prompt_{_safe_name(request.tile_id)}.grid"
            write_grid(request.mask, ref)
            msg["mask_ref"] = str(ref)
        return msg
    raise InputError(f"unknown op {op!r}")


def _safe_name(tile_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in tile_id)


class _WireBackend:
    """Shared decode logic for subprocess and HTTP transports."""

    backend_id = "wire"

    def __init__(self, workdir: str | Path | None = None):
        self._workdir = Path(workdir) if workdir else Path(".uvkit_wire")
        self._workdir.mkdir(parents=True, exist_ok=True)

    def _roundtrip(self, message: dict) -> dict:
        raise NotImplementedError

    def _ask(self, message: dict) -> dict:
        reply = self._roundtrip(message)
        if not isinstance(reply, dict):
            raise BackendResponseError(f"tile {message['tile_id']}: reply is not a JSON object")
        if "error" in reply:
            raise BackendResponseError(f"tile {message['tile_id']}: backend error: {reply['error']}")
        if reply.get("tile_id") != message["tile_id"]:
            raise BackendResponseError(
                f"tile {message['tile_id']}: reply tile_id {reply.get('tile_id')!r} does not match"
            )
        return reply

    def segment(self, request: TileRequest) -> SegmentationResponse:
        reply = self._ask(_encode_request("segment", request, self._workdir))
        ref = reply.get("grid_ref")
        if not ref:
            raise BackendResponseError(f"tile {request.tile_id}: segment reply missing grid_ref")
        probs, _ = _read_prob_or_grid(ref)
        return SegmentationResponse(request.tile_id, probs, str(reply.get("backend_id", "")))

    def embed(self, cell: GridCell) -> EmbeddingMatrix:
        reply = self._ask(_encode_request("embed", cell, self._workdir))
        ref = reply.get("grid_ref")
        if not ref:
            raise BackendResponseError(f"cell {cell.cell_id}: embed reply missing grid_ref")
        return read_embedding(ref)

    def refine(self, request: RefineRequest) -> RefineResponse:
        reply = self._ask(_encode_request("refine", request, self._workdir))
        raw = reply.get("candidates")
        if raw is None:
            raw = [{"grid_ref": reply.get("grid_ref"), "confidence": reply.get("confidence")}]
        cands = []
        for item in raw:
            ref = item.get("grid_ref")
            conf = item.get("confidence")
            if not ref or conf is None:
                raise BackendResponseError(f"tile {request.tile_id}: refine candidate missing grid_ref/confidence")
            cands.append(RefineCandidate(read_grid(ref), float(conf)))
        return RefineResponse(request.tile_id, tuple(cands), str(reply.get("backend_id", "wire")))


def _read_prob_or_grid(ref: str) -> tuple[np.ndarray, Frame]:
    try:
        with open(ref, "rb") as fh:
            magic = fh.read(5)
    except OSError as exc:
        raise BackendResponseError(f"cannot read raster reference {ref!r}: {exc}") from exc
    if magic.startswith(b"PGRID"):
        return read_prob_grid(ref)
    mask = read_grid(ref)
    return mask.data.astype(np.float64), mask.frame


# Embedding container: "EMB <rows> <cols>\n" + row-major float64 little-endian.


def write_embedding(matrix: EmbeddingMatrix, path: str | Path) -> None:
    rows, cols = matrix.values.shape
    with open(path, "wb") as fh:
        fh.write(f"EMB {rows} {cols}\n".encode("ascii"))
        fh.write(matrix.values.astype("<f8").tobytes())


def read_embedding(path: str | Path) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        parts = fh.readline().split()
        if len(parts) != 3 or parts[0] != b"EMB":
            raise BackendResponseError(f"{path}: expected 'EMB rows cols' header")
        rows, cols = int(parts[1]), int(parts[2])
        payload = fh.read(8 * rows * cols)
    if len(payload) != 8 * rows * cols:
        raise BackendResponseError(f"{path}: embedding payload truncated")
    return EmbeddingMatrix(np.frombuffer(payload, dtype="<f8").reshape(rows, cols))


class SubprocessBackend(_WireBackend):
    """Line-delimited JSON over a long-lived child process's stdin/stdout.

    One writer lock serializes request lines; a reader thread matches replies
    to waiters by tile_id, so several calls may be in flight at once."""

    def __init__(self, command: str, timeout_s: float = 60.0, workdir: str | Path | None = None):
        super().__init__(workdir)
        self.backend_id = f"cmd:{command}"
        self._timeout = timeout_s
        self._proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        self._write_lock = threading.Lock()
        self._pending: dict[str, "threading.Event"] = {}
        self._replies: dict[str, dict] = {}
        self._state_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                reply = json.loads(line)
            except json.JSONDecodeError:
                continue  # garbage lines are a transport concern; waiters time out
            key = str(reply.get("tile_id"))
            with self._state_lock:
                event = self._pending.get(key)
                if event is not None:
                    self._replies[key] = reply
                    event.set()

    def _roundtrip(self, message: dict) -> dict:
        if self._proc.poll() is not None:
            raise BackendTransportError(f"backend process exited with {self._proc.returncode}")
        key = str(message["tile_id"])
        event = threading.Event()
        with self._state_lock:
            self._pending[key] = event
        try:
            try:
                with self._write_lock:
                    assert self._proc.stdin is not None
                    self._proc.stdin.write(json.dumps(message) + "\n")
                    self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise BackendTransportError(f"write to backend failed: {exc}") from exc
            if not event.wait(self._timeout):
                raise BackendTransportError(f"no reply for tile {key} within {self._timeout}s")
            with self._state_lock:
                return self._replies.pop(key)
        finally:
            with self._state_lock:
                self._pending.pop(key, None)
                self._replies.pop(key, None)

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                assert self._proc.stdin is not None
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class HttpBackend(_WireBackend):
    """One JSON document per HTTP POST; the response body is the reply."""

    def __init__(self, url: str, timeout_s: float = 60.0, workdir: str | Path | None = None):
        super().__init__(workdir)
        self.backend_id = url
        self._url = url
        self._timeout = timeout_s

    def _roundtrip(self, message: dict) -> dict:
        body = json.dumps(message).encode("utf-8")
        req = urllib.request.Request(self._url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self._timeout) as resp:
                payload = resp.read()
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            raise BackendTransportError(f"POST {self._url} failed: {exc}") from exc
        try:
            return json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BackendResponseError(f"POST {self._url}: reply is not JSON: {exc}") from exc


def open_wire_backend(uri: str | None = None, timeout_s: float = 60.0, workdir: str | Path | None = None) -> _WireBackend:
    """Build a transport from a URI (default: $UVKIT_BACKEND_URI)."""
    uri = uri or os.environ.get(ENV_BACKEND_URI)
    if not uri:
        raise InputError(f"no backend URI given and {ENV_BACKEND_URI} is unset")
    if uri.startswith("http://") or uri.startswith("https://"):
        return HttpBackend(uri, timeout_s=timeout_s, workdir=workdir)
    return SubprocessBackend(uri, timeout_s=timeout_s, workdir=workdir)
