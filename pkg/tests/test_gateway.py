"""Backend envelopes: validation, retries, and the wire protocol."""

import sys
import textwrap

import numpy as np
import pytest

from uvkit.errors import BackendResponseError, BackendTransportError, InputError
from uvkit.gateway import (
    ENV_BACKEND_URI,
    CallPolicy,
    HttpBackend,
    PromptPoint,
    RefineCandidate,
    RefineRequest,
    RefineResponse,
    SegmentationResponse,
    SubprocessBackend,
    TileRequest,
    best_candidate,
    embed,
    open_wire_backend,
    read_embedding,
    refine,
    route,
    segment,
    write_embedding,
)
from uvkit.geomesh import BinaryMask, Frame
from uvkit.sampler import EmbeddingMatrix, GridCell

FAST = CallPolicy(timeout_s=5.0, retries=2, backoff_base_s=0.0)


def tile_frame(px=256):
    return Frame(px, px, (0.0, float(px)), 1.0)


def flat_mask(frame, value=0):
    data = np.full(frame.shape, value, dtype=np.uint8)
    return BinaryMask(data, frame.origin, frame.resolution)


# ---------------------------------------------------------------------------
# request shapes and routing
# ---------------------------------------------------------------------------


def test_tile_request_validation():
    req = TileRequest("t", tile_frame(256))
    assert req.tile_size == 256
    assert not req.vector_context_present
    assert TileRequest("t", tile_frame(1024), vector_ref="v.json").vector_context_present
    with pytest.raises(InputError):
        TileRequest("t", Frame(300, 300, (0, 300), 1.0))
    with pytest.raises(InputError):
        TileRequest("t", Frame(256, 1024, (0, 1024), 1.0))


def test_route_picks_model_family():
    assert route(True) == "multimodal"
    assert route(False) == "rs-only"


def test_call_policy_validation():
    CallPolicy(1.0, 0, 0.0)
    for bad in (dict(timeout_s=0), dict(retries=-1), dict(backoff_base_s=-0.5)):
        with pytest.raises(InputError):
            CallPolicy(**bad)


# ---------------------------------------------------------------------------
# retry behaviour
# ---------------------------------------------------------------------------


class FlakySegmenter:
    backend_id = "flaky"

    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def segment(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise BackendTransportError("down")
        return SegmentationResponse(
            request.tile_id, np.full(request.frame.shape, 0.5), self.backend_id
        )


def test_transport_failures_are_retried():
    backend = FlakySegmenter(failures=2)
    resp = segment(TileRequest("t", tile_frame()), backend, FAST)
    assert backend.calls == 3
    assert resp.backend_id == "flaky"


def test_retries_exhausted_raises_transport_error():
    backend = FlakySegmenter(failures=5)
    with pytest.raises(BackendTransportError):
        segment(TileRequest("t", tile_frame()), backend, FAST)
    assert backend.calls == FAST.retries + 1


def test_bad_response_is_not_retried():
    class WrongShape:
        backend_id = "x"
        calls = 0

        def segment(self, request):
            self.calls += 1
            return SegmentationResponse(request.tile_id, np.zeros((8, 8)), "x")

    backend = WrongShape()
    with pytest.raises(BackendResponseError):
        segment(TileRequest("t", tile_frame()), backend, FAST)
    assert backend.calls == 1


# ---------------------------------------------------------------------------
# envelope validation
# ---------------------------------------------------------------------------


def seg_backend(make_probs, backend_id="b"):
    class B:
        def __init__(self):
            self.backend_id = backend_id

        def segment(self, request):
            return SegmentationResponse(request.tile_id, make_probs(request), backend_id)

    return B()


def test_segment_response_validation():
    req = TileRequest("t", tile_frame())
    with pytest.raises(BackendResponseError):
        segment(req, seg_backend(lambda r: np.full(r.frame.shape, 1.5)), FAST)
    with pytest.raises(BackendResponseError):
        segment(req, seg_backend(lambda r: np.full(r.frame.shape, np.nan)), FAST)
    with pytest.raises(BackendResponseError):
        segment(req, seg_backend(lambda r: np.full(r.frame.shape, 0.5), backend_id=""), FAST)
    ok = segment(req, seg_backend(lambda r: np.full(r.frame.shape, 0.25)), FAST)
    assert ok.probabilities.dtype == np.float64


def refine_backend(candidates):
    class R:
        backend_id = "r"

        def refine(self, request):
            return RefineResponse(request.tile_id, tuple(candidates), "r")

    return R()


def test_refine_response_validation():
    frame = tile_frame()
    req = RefineRequest("t", frame, (PromptPoint(1.0, 2.0, True),))
    with pytest.raises(BackendResponseError):
        refine(req, refine_backend([]), FAST)
    shifted = BinaryMask(np.zeros(frame.shape, np.uint8), (10.0, 256.0), 1.0)
    with pytest.raises(BackendResponseError):
        refine(req, refine_backend([RefineCandidate(shifted, 0.5)]), FAST)
    with pytest.raises(BackendResponseError):
        refine(req, refine_backend([RefineCandidate(flat_mask(frame), 1.5)]), FAST)
    ok = refine(req, refine_backend([RefineCandidate(flat_mask(frame), 0.8)]), FAST)
    assert ok.candidates[0].confidence == 0.8


def test_embed_coerces_arrays_and_rejects_garbage():
    cell = GridCell(0, (0.0, 0.0, 512.0, 512.0))

    class ArrayProvider:
        backend_id = "a"

        def embed(self, cell):
            return np.ones((2, 3))

    out = embed(cell, ArrayProvider(), FAST)
    assert isinstance(out, EmbeddingMatrix) and out.values.shape == (2, 3)

    class BadProvider:
        backend_id = "bad"

        def embed(self, cell):
            return "nonsense"

    with pytest.raises(BackendResponseError):
        embed(cell, BadProvider(), FAST)


def test_best_candidate_strict_improvement_keeps_first():
    frame = tile_frame()
    a, b, c = (RefineCandidate(flat_mask(frame, v), conf) for v, conf in ((0, 0.7), (1, 0.7), (0, 0.9)))
    resp = RefineResponse("t", (a, b, c), "r")
    assert best_candidate(resp) is c
    resp_tie = RefineResponse("t", (a, b), "r")
    assert best_candidate(resp_tie) is a


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------


def test_embedding_file_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    matrix = EmbeddingMatrix(rng.normal(size=(16, 32)))
    path = tmp_path / "cell.emb"
    write_embedding(matrix, path)
    back = read_embedding(path)
    assert np.array_equal(back.values, matrix.values)
    assert path.read_bytes().startswith(b"EMB 16 32\n")


def test_embedding_file_errors(tmp_path):
    bad = tmp_path / "bad.emb"
    bad.write_bytes(b"NOPE 2 2\n" + b"\x00" * 32)
    with pytest.raises(BackendResponseError):
        read_embedding(bad)
    short = tmp_path / "short.emb"
    short.write_bytes(b"EMB 2 2\n" + b"\x00" * 16)
    with pytest.raises(BackendResponseError):
        read_embedding(short)


# ---------------------------------------------------------------------------
# wire transports
# ---------------------------------------------------------------------------

FAKE_BACKEND = textwrap.dedent(
    """
    import json, sys
    from pathlib import Path
    import numpy as np
    from uvkit.geomesh import BinaryMask, Frame, read_grid, write_grid, write_prob_grid
    from uvkit.gateway import write_embedding
    from uvkit.sampler import EmbeddingMatrix

    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for line in sys.stdin:
        msg = json.loads(line)
        tid = msg["tile_id"]
        if tid == "boom":
            print(json.dumps({"tile_id": tid, "error": "synthetic failure"}), flush=True)
            continue
        n += 1
        if msg["op"] == "segment":
            w, h, ox, oy, res = msg["frame"]
            frame = Frame(int(w), int(h), (ox, oy), res)
            ref = out / f"seg_{n}.pgrid"
            write_prob_grid(np.full(frame.shape, 0.75), frame, ref)
            print(json.dumps({"tile_id": tid, "grid_ref": str(ref), "backend_id": "fake-seg"}), flush=True)
        elif msg["op"] == "embed":
            ref = out / f"emb_{n}.emb"
            write_embedding(EmbeddingMatrix(np.arange(8.0).reshape(2, 4)), ref)
            print(json.dumps({"tile_id": tid, "grid_ref": str(ref), "backend_id": "fake-emb"}), flush=True)
        elif msg["op"] == "refine":
            w, h, ox, oy, res = msg["frame"]
            frame = Frame(int(w), int(h), (ox, oy), res)
            if "mask_ref" in msg:
                mask = read_grid(msg["mask_ref"])
            else:
                data = np.zeros(frame.shape, np.uint8)
                data[: int(h) // 2] = 1
                mask = BinaryMask(data, frame.origin, frame.resolution)
            a = out / f"ref_{n}_a.grid"
            b = out / f"ref_{n}_b.grid"
            write_grid(mask, a)
            write_grid(mask.replace(1 - mask.data), b)
            reply = {
                "tile_id": tid,
                "candidates": [
                    {"grid_ref": str(b), "confidence": 0.4},
                    {"grid_ref": str(a), "confidence": 0.9},
                ],
                "backend_id": "fake-refine",
            }
            print(json.dumps(reply), flush=True)
    """
)


@pytest.fixture()
def wire(tmp_path):
    script = tmp_path / "fake_backend.py"
    script.write_text(FAKE_BACKEND)
    command = f"{sys.executable} {script} {tmp_path / 'server'}"
    backend = open_wire_backend(command, timeout_s=30.0, workdir=tmp_path / "wire")
    assert isinstance(backend, SubprocessBackend)
    yield backend
    backend.close()


def test_wire_segment_and_embed(wire):
    resp = segment(TileRequest("t0", tile_frame(), image_ref="img"), wire, FAST)
    assert resp.backend_id == "fake-seg"
    assert float(resp.probabilities.min()) == pytest.approx(0.75, abs=1e-6)

    matrix = embed(GridCell(3, (0.0, 0.0, 512.0, 512.0)), wire, FAST)
    assert np.array_equal(matrix.values, np.arange(8.0).reshape(2, 4))


def test_wire_refine_echoes_mask_prompt(wire):
    frame = tile_frame()
    data = np.zeros(frame.shape, np.uint8)
    data[40:90, 10:200] = 1
    prompt = BinaryMask(data, frame.origin, frame.resolution)
    req = RefineRequest("t1", frame, (PromptPoint(5.0, 5.0, True),), mask=prompt)
    resp = refine(req, wire, FAST)
    best = best_candidate(resp)
    assert best.confidence == 0.9
    assert np.array_equal(best.mask.data, prompt.data)


def test_wire_error_reply_raises_response_error(wire):
    req = TileRequest("boom", tile_frame())
    with pytest.raises(BackendResponseError, match="synthetic failure"):
        segment(req, wire, FAST)


def test_wire_dead_process_is_transport_error(tmp_path):
    backend = open_wire_backend("false", timeout_s=2.0, workdir=tmp_path)
    try:
        policy = CallPolicy(timeout_s=2.0, retries=1, backoff_base_s=0.0)
        with pytest.raises(BackendTransportError):
            segment(TileRequest("t", tile_frame()), backend, policy)
    finally:
        backend.close()


def test_open_wire_backend_uri_dispatch(tmp_path, monkeypatch):
    assert isinstance(
        open_wire_backend("http://127.0.0.1:9/x", workdir=tmp_path), HttpBackend
    )
    monkeypatch.delenv(ENV_BACKEND_URI, raising=False)
    with pytest.raises(InputError):
        open_wire_backend(None, workdir=tmp_path)
    monkeypatch.setenv(ENV_BACKEND_URI, "https://example.invalid/seg")
    backend = open_wire_backend(None, workdir=tmp_path)
    assert isinstance(backend, HttpBackend)
    assert backend.backend_id == "https://example.invalid/seg"


def test_http_unreachable_is_transport_error(tmp_path):
    backend = HttpBackend("http://127.0.0.1:9/x", timeout_s=0.5, workdir=tmp_path)
    policy = CallPolicy(timeout_s=0.5, retries=0, backoff_base_s=0.0)
    with pytest.raises(BackendTransportError):
        segment(TileRequest("t", tile_frame()), backend, policy)
