"""Deterministic non-ML segmentation backend.

Binarizes by integer luminance, labels connected components, drops the
ones below a minimum area, and emits the surviving components as a
mask-document dict (row-major RLE counts, background first) in reading
order. Pure integer arithmetic end to end, so the same image and
parameters always produce the same document on any platform.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import ndimage

# cross-shaped structuring element: edge-adjacent pixels only
FOUR_CONNECTED = np.array(
    [[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class StubParams:
    """Thresholding and component-cleanup knobs."""

    threshold: int = 128
    min_area: int = 1
    connectivity: int = 4

    def __post_init__(self) -> None:
        if not 0 <= self.threshold <= 255:
            raise ValueError(
                f"threshold must be in [0, 255], got {self.threshold}")
        if self.min_area < 1:
            raise ValueError(f"min_area must be >= 1, got {self.min_area}")
        if self.connectivity not in (4, 8):
            raise ValueError(
                f"connectivity must be 4 or 8, got {self.connectivity}")


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Integer BT.601 luma per pixel; floor division keeps it exact."""
    r = rgb[..., 0].astype(np.int64)
    g = rgb[..., 1].astype(np.int64)
    b = rgb[..., 2].astype(np.int64)
    return (299 * r + 587 * g + 114 * b) // 1000


def rle_counts(mask: np.ndarray) -> list[int]:
    """Row-major alternating run lengths, background first.

    A leading zero marks a foreground pixel at (0, 0); no other zero
    counts ever appear.
    """
    flat = mask.ravel().tolist()
    counts: list[int] = []
    if flat and flat[0]:
        counts.append(0)
    for _, run in itertools.groupby(flat):
        counts.append(sum(1 for _ in run))
    return counts


def foreground_mask(rgb: np.ndarray, params: StubParams) -> np.ndarray:
    return luminance(rgb) >= params.threshold


def segment_image(rgb: np.ndarray, params: StubParams = StubParams(),
                  image_id: str = "upload") -> dict[str, Any]:
    """Mask document for one RGB image under the stub backend.

    Components come out in reading order of their bounding boxes;
    ids are assigned 1..n in that order. Each segment carries bbox and
    area hints alongside its counts.
    """
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an RGB array, got shape {rgb.shape}")
    height, width = rgb.shape[:2]
    fg = foreground_mask(rgb, params)
    structure = (FOUR_CONNECTED if params.connectivity == 4
                 else EIGHT_CONNECTED)
    labels, n_components = ndimage.label(fg, structure=structure)
    kept = []
    for label in range(1, n_components + 1):
        mask = labels == label
        area = int(np.count_nonzero(mask))
        if area < params.min_area:
            continue
        rows, cols = np.nonzero(mask)
        x = int(cols.min())
        y = int(rows.min())
        bbox = [x, y, int(cols.max()) - x + 1, int(rows.max()) - y + 1]
        kept.append((bbox, area, mask))
    kept.sort(key=lambda item: (item[0][1], item[0][0]))
    return {
        "image_id": image_id,
        "width": width,
        "height": height,
        "segments": [
            {"id": i, "counts": rle_counts(mask), "bbox": bbox, "area": area}
            for i, (bbox, area, mask) in enumerate(kept, start=1)
        ],
    }
