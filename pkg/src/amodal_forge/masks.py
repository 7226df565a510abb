"""Binary masks, boxes, RLE serialization and the IoU primitives.

Masks are dense booleans in memory (synthesis and metrics are pixel bound)
and run-length encoded on disk. All values are immutable after construction
and safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .errors import BoxError, CorruptRleError, EmptyMaskError, ShapeMismatchError


class BinaryMask:
    """Dense boolean pixel grid, row-major, (height, width)."""

    __slots__ = ("array",)

    def __init__(self, array: np.ndarray):
        arr = np.asarray(array)
        if arr.ndim != 2:
            raise ShapeMismatchError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatchError(f"mask dimensions must be positive, got {arr.shape}")
        arr = arr.astype(bool, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    def __setattr__(self, name, value):
        raise AttributeError("BinaryMask is immutable")

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    def popcount(self) -> int:
        return int(self.array.sum())

    def is_empty(self) -> bool:
        return not self.array.any()

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def ones(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.array.shape == other.array.shape and bool(
            np.array_equal(self.array, other.array)
        )

    def __hash__(self):
        return hash((self.array.shape, self.array.tobytes()))

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, popcount={self.popcount()})"


@dataclass(frozen=True)
class BBox:
    """Half-open integer rectangle: x in [x_min, x_max), y in [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not isinstance(v, (int, np.integer)):
                raise BoxError(f"box coordinates must be integers, got {v!r}")
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise BoxError(
                f"degenerate box [{self.x_min},{self.y_min},{self.x_max},{self.y_max}]"
            )

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class RleMask:
    """Alternating zero/one run lengths over the row-major grid, starting with zeros."""

    width: int
    height: int
    runs: tuple

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise CorruptRleError(f"bad dimensions {self.width}x{self.height}")
        if any((not isinstance(r, (int, np.integer))) or r < 0 for r in self.runs):
            raise CorruptRleError("runs must be non-negative integers")
        if sum(self.runs) != self.width * self.height:
            raise CorruptRleError(
                f"runs sum to {sum(self.runs)}, expected {self.width * self.height}"
            )


def _check_same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise ShapeMismatchError(
            f"mask shapes differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def mask_and(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    """Pixelwise logical AND."""
    _check_same_shape(a, b)
    return BinaryMask(a.array & b.array)


def mask_or(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    """Pixelwise logical OR."""
    _check_same_shape(a, b)
    return BinaryMask(a.array | b.array)


def mask_sub(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    """Set difference a \\ b, i.e. a AND NOT b."""
    _check_same_shape(a, b)
    return BinaryMask(a.array & ~b.array)


def mask_not(a: BinaryMask) -> BinaryMask:
    return BinaryMask(~a.array)


def iou(a: BinaryMask, b: BinaryMask) -> Optional[float]:
    """Intersection over union.

    Returns None (UNDEFINED) when the union is empty so callers can skip the
    sample; two empty masks must not count as a perfect match when averaging
    over occluded regions.
    """
    _check_same_shape(a, b)
    inter = int((a.array & b.array).sum())
    union = int((a.array | b.array).sum())
    if union == 0:
        return None
    return inter / union


def bbox_of(mask: BinaryMask) -> BBox:
    """Minimal half-open box containing all set pixels."""
    if mask.is_empty():
        raise EmptyMaskError("bbox_of requires a nonempty mask")
    rows = np.flatnonzero(mask.array.any(axis=1))
    cols = np.flatnonzero(mask.array.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def expand_box_real(b: BBox, per_axis_factor: float) -> tuple:
    """Scale width/height by (1 + factor) about the center, real-valued.

    The unclamped real-valued area is exactly (1+factor)^2 times the input
    area; with factor 0.2 that is 1.44.
    """
    if per_axis_factor < 0:
        raise BoxError(f"expansion factor must be >= 0, got {per_axis_factor}")
    cx = (b.x_min + b.x_max) / 2.0
    cy = (b.y_min + b.y_max) / 2.0
    hw = b.width * (1.0 + per_axis_factor) / 2.0
    hh = b.height * (1.0 + per_axis_factor) / 2.0
    return (cx - hw, cy - hh, cx + hw, cy + hh)


def expand_box(b: BBox, per_axis_factor: float, clamp: tuple) -> BBox:
    """Expand a box about its center, round outward, clamp to image bounds.

    clamp is (width, height) of the image. Raises BoxError if the clamped
    box is empty.
    """
    w, h = clamp
    x0, y0, x1, y1 = expand_box_real(b, per_axis_factor)
    xi0 = max(0, int(math.floor(x0)))
    yi0 = max(0, int(math.floor(y0)))
    xi1 = min(int(w), int(math.ceil(x1)))
    yi1 = min(int(h), int(math.ceil(y1)))
    if not (xi0 < xi1 and yi0 < yi1):
        raise BoxError(f"expanded box degenerate after clamp to {w}x{h}")
    return BBox(xi0, yi0, xi1, yi1)


def box_to_mask(b: BBox, w: int, h: int) -> BinaryMask:
    """Ones inside the box, zeros elsewhere (the box-fill spatial prior)."""
    if b.x_max > w or b.y_max > h:
        raise BoxError(f"box {b} exceeds image bounds {w}x{h}")
    arr = np.zeros((h, w), dtype=bool)
    arr[b.y_min : b.y_max, b.x_min : b.x_max] = True
    return BinaryMask(arr)


def box_iou(a: BBox, b: BBox) -> float:
    """IoU between two boxes (area ratio, 0 when disjoint)."""
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union if union else 0.0


def rle_encode(mask: BinaryMask) -> RleMask:
    """Run-length encode; runs alternate starting with zeros."""
    flat = mask.array.reshape(-1)
    # boundaries between runs of equal values
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(mask.width, mask.height, tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> BinaryMask:
    """Inverse of rle_encode; lossless round trip."""
    flat = np.zeros(rle.width * rle.height, dtype=bool)
    pos = 0
    val = False
    for run in rle.runs:
        if val:
            flat[pos : pos + run] = True
        pos += run
        val = not val
    return BinaryMask(flat.reshape(rle.height, rle.width))


def rle_to_text(rle: RleMask) -> str:
    """ASCII form: `w h r0 r1 r2 ...` (runs start with zeros)."""
    return " ".join([str(rle.width), str(rle.height)] + [str(r) for r in rle.runs])


def rle_from_text(text: str) -> RleMask:
    parts = text.split()
    if len(parts) < 2:
        raise CorruptRleError(f"RLE text too short: {text!r}")
    try:
        nums = [int(p) for p in parts]
    except ValueError as e:
        raise CorruptRleError(f"non-integer token in RLE text: {e}") from e
    return RleMask(nums[0], nums[1], tuple(nums[2:]))


def mask_to_png(mask: BinaryMask, path) -> None:
    """8-bit single-channel PNG with 0/255 values."""
    img = Image.fromarray(mask.array.astype(np.uint8) * 255, mode="L")
    img.save(path, format="PNG")


def mask_from_png(path) -> BinaryMask:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise CorruptRleError(f"mask PNG {path} has values other than 0/255")
    return BinaryMask(arr == 255)
