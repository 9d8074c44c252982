"""Deterministic Set-of-Mark rendering.

Two variants: no-context places the filtered candidates on a fresh white
canvas in a numbered grid; in-context boxes and numbers them inside the
original image. Mark glyphs come from an embedded 5x7 bitmap font scaled
by integer replication, so equal inputs always produce byte-identical
rasters: no system fonts, no anti-aliasing, no timestamps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import BBox, RasterImage, SomAnnotateError, Strategy
from .filtering import Candidate


class NoCandidates(SomAnnotateError):
    """Rendering requires at least one candidate."""


class CandidateLargerThanMaxCanvas(SomAnnotateError):
    """A candidate cannot fit on a canvas within the configured limit."""


class MarkOutOfRange(SomAnnotateError):
    """Mark glyphs cover 1..999 only."""


# 5x7 digit bitmaps, row-major, "1" = lit pixel.
_DIGITS_5X7: dict[str, tuple[str, ...]] = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

GLYPH_BADGE_FILL = (204, 0, 0)
GLYPH_BORDER = (0, 0, 0)
GLYPH_DIGIT = (255, 255, 255)
WHITE = (255, 255, 255)

MAX_MARK = 999


@dataclass(frozen=True)
class LayoutConfig:
    """Rendering knobs; defaults match the shipped golden-image tests."""

    padding: int = 16
    glyph_scale: int = 1
    grid_columns: int | None = None
    stroke_width: int = 2
    stroke_color: tuple[int, int, int] = (255, 0, 0)
    max_canvas: int = 4096

    def __post_init__(self) -> None:
        if self.padding < 1:
            raise ValueError(f"padding must be >= 1, got {self.padding}")
        if self.glyph_scale < 1:
            raise ValueError(f"glyph scale must be >= 1, got {self.glyph_scale}")
        if self.stroke_width < 1:
            raise ValueError(f"stroke width must be >= 1, got {self.stroke_width}")
        if self.grid_columns is not None and self.grid_columns < 1:
            raise ValueError(f"grid columns must be >= 1, got {self.grid_columns}")


@dataclass(frozen=True)
class MarkedImage:
    """A rendered prompt image plus the mark bookkeeping for it."""

    image: RasterImage
    strategy: Strategy
    mark_index: Mapping[int, BBox]
    candidate_index: Mapping[int, Candidate]

    def __post_init__(self) -> None:
        if self.strategy not in (Strategy.NC, Strategy.IC):
            raise ValueError(f"marked images are NC or IC, got {self.strategy}")
        marks = set(self.mark_index)
        if marks != set(self.candidate_index):
            raise ValueError("mark_index and candidate_index keys differ")
        if marks != set(range(1, len(marks) + 1)):
            raise ValueError(f"marks must be consecutive 1..n, got {sorted(marks)}")
        for mark, box in self.mark_index.items():
            if box.x2 > self.image.width or box.y2 > self.image.height:
                raise ValueError(f"glyph box for mark {mark} exceeds image bounds")


@dataclass(frozen=True)
class SomBundle:
    """The image list one strategy sends to the model (NC first for Comb)."""

    strategy: Strategy
    images: tuple[MarkedImage, ...]

    def __post_init__(self) -> None:
        expected = {
            Strategy.NC: (Strategy.NC,),
            Strategy.IC: (Strategy.IC,),
            Strategy.COMB: (Strategy.NC, Strategy.IC),
        }
        if self.strategy not in expected:
            raise ValueError(f"bundles exist for NC/IC/Comb, got {self.strategy}")
        actual = tuple(m.strategy for m in self.images)
        if actual != expected[self.strategy]:
            raise ValueError(f"{self.strategy.value} bundle must carry {expected[self.strategy]}, got {actual}")
        first = self.images[0]
        for other in self.images[1:]:
            if set(other.candidate_index) != set(first.candidate_index):
                raise ValueError("bundle images must share one candidate set")

    @property
    def marks(self) -> frozenset[int]:
        return frozenset(self.images[0].candidate_index)


def render_mark_glyph(mark: int, scale: int) -> np.ndarray:
    """Rasterize a mark number as white digits on a red badge.

    Digits are the embedded 5x7 font scaled by pixel replication, with a
    one-scaled-pixel gap between digits and an unscaled 1-px black border.
    """
    if not 1 <= mark <= MAX_MARK:
        raise MarkOutOfRange(f"mark {mark} outside 1..{MAX_MARK}")
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    digits = str(mark)
    inner_w = (5 * len(digits) + (len(digits) - 1)) * scale
    inner_h = 7 * scale
    stencil = np.empty((inner_h + 2, inner_w + 2, 3), dtype=np.uint8)
    stencil[:, :] = GLYPH_BORDER
    stencil[1:-1, 1:-1] = GLYPH_BADGE_FILL
    for i, digit in enumerate(digits):
        rows = _DIGITS_5X7[digit]
        x0 = 1 + i * 6 * scale
        for r, row in enumerate(rows):
            for c, bit in enumerate(row):
                if bit == "1":
                    y = 1 + r * scale
                    x = x0 + c * scale
                    stencil[y:y + scale, x:x + scale] = GLYPH_DIGIT
    stencil.flags.writeable = False
    return stencil


def draw_box_outline(canvas: np.ndarray, bbox: BBox,
                     color: tuple[int, int, int], thickness: int = 2) -> None:
    """Paint a stroke ring just inside the box edges (in place)."""
    t = thickness
    x0, y0, x1, y1 = bbox.x, bbox.y, bbox.x2, bbox.y2
    canvas[y0:min(y0 + t, y1), x0:x1] = color
    canvas[max(y1 - t, y0):y1, x0:x1] = color
    canvas[y0:y1, x0:min(x0 + t, x1)] = color
    canvas[y0:y1, max(x1 - t, x0):x1] = color


def _clamped_glyph_box(anchor_x: int, anchor_y: int, stencil: np.ndarray,
                       canvas_w: int, canvas_h: int) -> BBox:
    gh, gw = stencil.shape[:2]
    if gw > canvas_w or gh > canvas_h:
        raise CandidateLargerThanMaxCanvas(
            f"glyph {gw}x{gh} does not fit a {canvas_w}x{canvas_h} canvas")
    gx = min(max(anchor_x, 0), canvas_w - gw)
    gy = min(max(anchor_y, 0), canvas_h - gh)
    return BBox(x=gx, y=gy, w=gw, h=gh)


def _sorted_by_mark(candidates: Sequence[Candidate]) -> list[Candidate]:
    ordered = sorted(candidates, key=lambda c: c.mark)
    marks = [c.mark for c in ordered]
    if marks != list(range(1, len(marks) + 1)):
        raise ValueError(f"candidate marks must be consecutive 1..n, got {marks}")
    return ordered


def render_no_context(image: RasterImage, candidates: Sequence[Candidate],
                      layout: LayoutConfig = LayoutConfig()) -> MarkedImage:
    """Extract candidates onto a plain white canvas, numbered in a grid.

    Candidates keep mark order, flowing left to right then top to bottom
    with fixed padding. Pixels are copied verbatim from the source image
    at native scale; only the member pixels of each region are copied, not
    the full bbox. Each glyph sits immediately above-left of its
    candidate's placed bbox, clamped inside the canvas.
    """
    ordered = _sorted_by_mark(candidates)
    if not ordered:
        raise NoCandidates("no-context rendering needs at least one candidate")
    pad = layout.padding
    for cand in ordered:
        if cand.bbox.w + 2 * pad > layout.max_canvas or \
                cand.bbox.h + 2 * pad > layout.max_canvas:
            raise CandidateLargerThanMaxCanvas(
                f"candidate mark {cand.mark} ({cand.bbox.w}x{cand.bbox.h}) "
                f"exceeds max canvas {layout.max_canvas}")

    columns = layout.grid_columns or max(1, math.isqrt(len(ordered) - 1) + 1)
    rows = [ordered[i:i + columns] for i in range(0, len(ordered), columns)]

    placements: dict[int, tuple[int, int]] = {}
    canvas_w = 0
    y = pad
    for row in rows:
        x = pad
        row_h = max(c.bbox.h for c in row)
        for cand in row:
            placements[cand.mark] = (x, y)
            x += cand.bbox.w + pad
        canvas_w = max(canvas_w, x)
        y += row_h + pad
    canvas_h = y

    canvas = np.empty((canvas_h, canvas_w, 3), dtype=np.uint8)
    canvas[:, :] = WHITE
    source = image.array
    for cand in ordered:
        px, py = placements[cand.mark]
        bb = cand.bbox
        local = cand.region.mask[bb.y:bb.y2, bb.x:bb.x2]
        target = canvas[py:py + bb.h, px:px + bb.w]
        target[local] = source[bb.y:bb.y2, bb.x:bb.x2][local]

    mark_index: dict[int, BBox] = {}
    for cand in ordered:
        px, py = placements[cand.mark]
        stencil = render_mark_glyph(cand.mark, layout.glyph_scale)
        box = _clamped_glyph_box(px - stencil.shape[1], py - stencil.shape[0],
                                 stencil, canvas_w, canvas_h)
        canvas[box.y:box.y2, box.x:box.x2] = stencil
        mark_index[cand.mark] = box

    return MarkedImage(
        image=RasterImage(canvas), strategy=Strategy.NC,
        mark_index=mark_index,
        candidate_index={c.mark: c for c in ordered})


def render_in_context(image: RasterImage, candidates: Sequence[Candidate],
                      layout: LayoutConfig = LayoutConfig()) -> MarkedImage:
    """Box and number the candidates inside the original image.

    Each candidate bbox gets a stroke ring painted just inside its edges;
    the glyph anchors at the bbox's top-left exterior, clamped inside the
    image. Everything outside strokes and glyph badges is untouched.
    """
    ordered = _sorted_by_mark(candidates)
    if not ordered:
        raise NoCandidates("in-context rendering needs at least one candidate")
    canvas = image.mutable_copy()
    for cand in ordered:
        if cand.bbox.x2 > image.width or cand.bbox.y2 > image.height:
            raise ValueError(
                f"candidate mark {cand.mark} bbox exceeds the image grid")
        draw_box_outline(canvas, cand.bbox, layout.stroke_color,
                         layout.stroke_width)

    mark_index: dict[int, BBox] = {}
    for cand in ordered:
        stencil = render_mark_glyph(cand.mark, layout.glyph_scale)
        box = _clamped_glyph_box(cand.bbox.x - stencil.shape[1],
                                 cand.bbox.y - stencil.shape[0],
                                 stencil, image.width, image.height)
        canvas[box.y:box.y2, box.x:box.x2] = stencil
        mark_index[cand.mark] = box

    return MarkedImage(
        image=RasterImage(canvas), strategy=Strategy.IC,
        mark_index=mark_index,
        candidate_index={c.mark: c for c in ordered})


def render_bundle(image: RasterImage, candidates: Sequence[Candidate],
                  strategy: Strategy,
                  layout: LayoutConfig = LayoutConfig()) -> SomBundle:
    """Render the image list for a strategy: NC, IC, or both (NC first)."""
    if strategy == Strategy.NC:
        images = (render_no_context(image, candidates, layout),)
    elif strategy == Strategy.IC:
        images = (render_in_context(image, candidates, layout),)
    elif strategy == Strategy.COMB:
        images = (render_no_context(image, candidates, layout),
                  render_in_context(image, candidates, layout))
    else:
        raise ValueError(f"no bundle for strategy {strategy}")
    return SomBundle(strategy=strategy, images=images)


def mark_index_sidecar(marked: MarkedImage) -> dict:
    """JSON-ready sidecar mapping each mark to its glyph placement box."""
    return {"marks": {str(mark): box.as_list()
                      for mark, box in sorted(marked.mark_index.items())}}
