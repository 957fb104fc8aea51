"""Gaze heatmap to region-of-interest conversion.

A heatmap from an external gaze-target estimator is thresholded, the largest
8-connected blob is boxed, and the box is used to crop the RoI image. When
nothing survives the threshold the whole image stands in for the RoI.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import BoundingBox
from .errors import FormatError, ValidationError

HEATMAP_MAGIC = b"GVHM"
_HEADER = struct.Struct("<4sII")
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (height, width), row-major

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValidationError(f"heatmap must be 2-D, got shape {self.values.shape}")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray  # (height, width) bool

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


def binarize(h: Heatmap, threshold: float = 0.0) -> BinaryMask:
    """Set a bit wherever the score is strictly above ``threshold``."""
    if not np.all(np.isfinite(h.values)):
        raise ValidationError("heatmap contains non-finite values")
    return BinaryMask(np.asarray(h.values > threshold))


def rescale_mask(mask: BinaryMask, width: int, height: int) -> BinaryMask:
    """Nearest-neighbour resample of ``mask`` onto a width x height grid."""
    if (mask.width, mask.height) == (width, height):
        return mask
    rows = (np.arange(height) * mask.height) // height
    cols = (np.arange(width) * mask.width) // width
    return BinaryMask(mask.bits[np.ix_(rows, cols)])


def largest_component_box(bits: np.ndarray) -> tuple[int, int, int, int] | None:
    """(x, y, w, h) of the largest 8-connected true region, or None if empty.

    Equal areas go to the component whose first pixel in raster order comes first.
    """
    labels, count = ndimage.label(bits, structure=_EIGHT_CONNECTED)
    if count == 0:
        return None
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=count + 1)
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    best = int(ids[np.lexsort((first, -areas[ids]))[0]])
    sl = ndimage.find_objects(labels, max_label=best)[best - 1]
    y, x = sl[0].start, sl[1].start
    return x, y, sl[1].stop - x, sl[0].stop - y


def extract_roi(mask: BinaryMask, image_size: tuple[int, int]) -> BoundingBox:
    """Gaze-target box in image pixels; falls back to the full image for an empty mask."""
    W, H = image_size
    scaled = rescale_mask(mask, W, H)
    box = largest_component_box(scaled.bits)
    if box is None:
        return BoundingBox.full(W, H)
    return BoundingBox(*box)


def heatmap_to_roi(h: Heatmap, image_size: tuple[int, int], threshold: float = 0.0) -> BoundingBox:
    return extract_roi(binarize(h, threshold), image_size)


def crop(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Pixel-exact sub-image of an (H, W, ...) array."""
    x, y, w, h = (int(v) for v in (box.x, box.y, box.w, box.h))
    if (x, y, w, h) != (box.x, box.y, box.w, box.h):
        raise ValidationError(f"crop box must have integer coordinates, got {box}")
    H, W = image.shape[:2]
    if x + w > W or y + h > H:
        raise ValidationError(f"crop box {box.as_list()} exceeds image of size {W}x{H}")
    return image[y : y + h, x : x + w]


def integer_box(box: BoundingBox, image_size: tuple[int, int]) -> BoundingBox:
    """Snap a fractional box outward to whole pixels, clipped to the image."""
    W, H = image_size
    x0, y0 = int(np.floor(box.x)), int(np.floor(box.y))
    x1 = min(W, int(np.ceil(box.x + box.w)))
    y1 = min(H, int(np.ceil(box.y + box.h)))
    return BoundingBox(x0, y0, max(1, x1 - x0), max(1, y1 - y0))


def save_heatmap(h: Heatmap, path: str | Path) -> None:
    data = np.ascontiguousarray(h.values, dtype="<f4")
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(HEATMAP_MAGIC, h.width, h.height))
        fh.write(data.tobytes())


def load_heatmap(path: str | Path) -> Heatmap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, width, height = _HEADER.unpack_from(raw)
    if magic != HEATMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    payload = raw[_HEADER.size :]
    expected = 4 * width * height
    if len(payload) != expected:
        raise FormatError(
            f"{path}: header declares {width}x{height} ({expected} bytes) but payload has {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width).astype(np.float32)
    return Heatmap(values)
