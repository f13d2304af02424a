"""Binary rasters, morphology, and connected components.

Grids are row-major with the origin at the top-left pixel corner, world x
growing rightward along columns and world y decreasing down rows (north-up).
All operations are pure: input arrays are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import FrameMismatchError, InputError

# 4-connectivity: edge-adjacent pixels only, diagonals do not join.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class Frame:
    """Placement and shape of a raster grid.

    origin is the world (x, y) of the top-left pixel corner; resolution is
    meters per pixel. Pixel (row, col) covers world
    x in [ox + col*res, ox + (col+1)*res), y in (oy - (row+1)*res, oy - row*res].
    """

    width: int
    height: int
    origin: tuple[float, float]
    resolution: float

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise InputError(f"frame must be positive-sized, got {self.width}x{self.height}")
        if not (self.resolution > 0):
            raise InputError(f"resolution must be positive, got {self.resolution}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) in world coordinates."""
        ox, oy = self.origin
        return (ox, oy - self.height * self.resolution, ox + self.width * self.resolution, oy)

    def pixel_center(self, row: int, col: int) -> tuple[float, float]:
        ox, oy = self.origin
        return (ox + (col + 0.5) * self.resolution, oy - (row + 0.5) * self.resolution)

    def pixel_of(self, x: float, y: float) -> tuple[int, int]:
        """Containing pixel under the floor convention (gridline points snap
        right/down). May fall outside the grid; callers check bounds."""
        ox, oy = self.origin
        return (int(np.floor((oy - y) / self.resolution)), int(np.floor((x - ox) / self.resolution)))

    def blank(self) -> "BinaryMask":
        return BinaryMask(np.zeros(self.shape, dtype=np.uint8), self.origin, self.resolution)


@dataclass(frozen=True)
class BinaryMask:
    """A 0/1 raster with georeferencing. data has shape (height, width)."""

    data: np.ndarray
    origin: tuple[float, float]
    resolution: float

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.uint8, order="C", copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise InputError(f"mask data must be a non-empty 2-d array, got shape {arr.shape}")
        if arr.max(initial=0) > 1:
            raise InputError("mask values must be 0 or 1")
        if not (self.resolution > 0):
            raise InputError(f"resolution must be positive, got {self.resolution}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "resolution", float(self.resolution))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def frame(self) -> Frame:
        return Frame(self.width, self.height, self.origin, self.resolution)

    def count(self) -> int:
        """Number of foreground pixels."""
        return int(self.data.sum())

    def area_m2(self) -> float:
        return self.count() * self.resolution**2

    def same_frame(self, other: "BinaryMask") -> bool:
        return (
            self.data.shape == other.data.shape
            and self.origin == other.origin
            and self.resolution == other.resolution
        )

    def contains_point(self, x: float, y: float) -> bool:
        """True when (x, y) lies on a foreground pixel (floor convention)."""
        row, col = self.frame.pixel_of(x, y)
        if 0 <= row < self.height and 0 <= col < self.width:
            return bool(self.data[row, col])
        return False

    def replace(self, data: np.ndarray) -> "BinaryMask":
        """Same frame, new payload."""
        return BinaryMask(data, self.origin, self.resolution)


def _require_same_frame(a: BinaryMask, b: BinaryMask) -> None:
    if not a.same_frame(b):
        raise FrameMismatchError(
            f"frames differ: {a.width}x{a.height}@{a.origin}/{a.resolution} vs "
            f"{b.width}x{b.height}@{b.origin}/{b.resolution}"
        )


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Pixel intersection-over-union. Two empty masks have IoU 1.0."""
    _require_same_frame(a, b)
    fa = a.data.astype(bool)
    fb = b.data.astype(bool)
    union = int(np.count_nonzero(fa | fb))
    if union == 0:
        return 1.0
    inter = int(np.count_nonzero(fa & fb))
    return inter / union


def morphological_open(mask: BinaryMask, radius: int) -> BinaryMask:
    """Erosion then dilation with a square structuring element of side
    2*radius + 1. Pixels beyond the frame count as background, which keeps
    the operation anti-extensive (output is a subset of the input) and
    idempotent. radius 0 is the identity."""
    if radius < 0:
        raise InputError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return mask
    se = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    fg = mask.data.astype(bool)
    eroded = ndimage.binary_erosion(fg, structure=se, border_value=0)
    opened = ndimage.binary_dilation(eroded, structure=se, border_value=0)
    return mask.replace(opened.astype(np.uint8))


@dataclass(frozen=True)
class LabeledComponents:
    """4-connected components with deterministic labels.

    labels holds 0 for background and 1..count for components, numbered in
    raster-scan discovery order (the component whose first pixel appears
    earliest in row-major order gets label 1). areas[i] is the pixel count of
    label i+1."""

    labels: np.ndarray
    count: int
    areas: np.ndarray
    frame: Frame

    def component_mask(self, label: int) -> BinaryMask:
        if not (1 <= label <= self.count):
            raise InputError(f"label {label} out of range 1..{self.count}")
        return BinaryMask((self.labels == label).astype(np.uint8), self.frame.origin, self.frame.resolution)


def connected_components(mask: BinaryMask) -> LabeledComponents:
    """Label 4-connected foreground components in raster-scan discovery order."""
    raw, n = ndimage.label(mask.data, structure=_CROSS)
    if n == 0:
        return LabeledComponents(raw.astype(np.int32), 0, np.zeros(0, dtype=np.int64), mask.frame)
    # scipy's label order is an implementation detail; remap by first pixel.
    flat = raw.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    # reversed so earlier indices win the final write
    first[flat[nz[::-1]]] = nz[::-1]
    order = np.argsort(first[1:], kind="stable")  # old labels sorted by discovery
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return LabeledComponents(labels, int(n), areas, mask.frame)


def drop_small_components(mask: BinaryMask, min_area: int) -> BinaryMask:
    """Remove 4-connected components with pixel area < min_area."""
    if min_area <= 1:
        return mask
    comps = connected_components(mask)
    if comps.count == 0:
        return mask
    keep = np.concatenate(([False], comps.areas >= min_area))
    return mask.replace(keep[comps.labels].astype(np.uint8))


# ---------------------------------------------------------------------------
# Raster containers.
#
# Binary masks:       "GRID <width> <height> <origin_x> <origin_y> <resolution>\n"
#                     followed by width*height raw bytes, 0 or 1, row-major.
# Probability grids:  "PGRID ..." same header fields, payload float32
#                     little-endian row-major, values in [0, 1].
# ---------------------------------------------------------------------------


def _parse_header(line: bytes, magic: str, path: Path) -> tuple[int, int, tuple[float, float], float]:
    parts = line.decode("ascii").split()
    if len(parts) != 6 or parts[0] != magic:
        raise InputError(f"{path}: expected '{magic} w h ox oy res' header, got {line!r}")
    w, h = int(parts[1]), int(parts[2])
    ox, oy, res = float(parts[3]), float(parts[4]), float(parts[5])
    return w, h, (ox, oy), res


def write_grid(mask: BinaryMask, path: str | Path) -> None:
    path = Path(path)
    header = f"GRID {mask.width} {mask.height} {mask.origin[0]!r} {mask.origin[1]!r} {mask.resolution!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mask.data.tobytes())


def read_grid(path: str | Path) -> BinaryMask:
    path = Path(path)
    with open(path, "rb") as fh:
        w, h, origin, res = _parse_header(fh.readline().rstrip(b"\n"), "GRID", path)
        payload = fh.read(w * h + 1)
    if len(payload) != w * h:
        raise InputError(f"{path}: payload is {len(payload)} bytes, expected {w * h}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    if data.max(initial=0) > 1:
        raise InputError(f"{path}: GRID payload bytes must be 0 or 1")
    return BinaryMask(data, origin, res)


def write_prob_grid(probs: np.ndarray, frame: Frame, path: str | Path) -> None:
    arr = np.asarray(probs, dtype=np.float32)
    if arr.shape != frame.shape:
        raise InputError(f"probability grid shape {arr.shape} does not match frame {frame.shape}")
    header = f"PGRID {frame.width} {frame.height} {frame.origin[0]!r} {frame.origin[1]!r} {frame.resolution!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.astype("<f4").tobytes())


def read_prob_grid(path: str | Path) -> tuple[np.ndarray, Frame]:
    path = Path(path)
    with open(path, "rb") as fh:
        w, h, origin, res = _parse_header(fh.readline().rstrip(b"\n"), "PGRID", path)
        payload = fh.read(4 * w * h + 1)
    if len(payload) != 4 * w * h:
        raise InputError(f"{path}: payload is {len(payload)} bytes, expected {4 * w * h}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)
    return arr, Frame(w, h, origin, res)


def crop_to_frame(mask: BinaryMask, frame: Frame) -> BinaryMask:
    """Cut the window `frame` out of a larger aligned raster.

    The window must share the resolution, sit on the pixel lattice, and lie
    wholly inside the source raster."""
    src = mask.frame
    if frame.resolution != src.resolution:
        raise FrameMismatchError(
            f"window resolution {frame.resolution} != source {src.resolution}"
        )
    col0 = (frame.origin[0] - src.origin[0]) / src.resolution
    row0 = (src.origin[1] - frame.origin[1]) / src.resolution
    c0, r0 = int(round(col0)), int(round(row0))
    if abs(col0 - c0) > 1e-9 or abs(row0 - r0) > 1e-9:
        raise FrameMismatchError("window is not aligned to the source pixel lattice")
    if c0 < 0 or r0 < 0 or c0 + frame.width > src.width or r0 + frame.height > src.height:
        raise FrameMismatchError("window exceeds the source raster")
    data = mask.data[r0 : r0 + frame.height, c0 : c0 + frame.width]
    return BinaryMask(data, frame.origin, frame.resolution)
