"""Geometric and raster primitives shared by every pipeline stage.

All values are immutable after construction and all operations are pure,
so they are safe to use from concurrent workers. Pixel geometry is integer
lattice cells: a box at (x, y) with size (w, h) covers columns [x, x+w)
and rows [y, y+h). Overlap arithmetic is exact (integer counts, rational
ratios); no floating-point area formulas anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, Union

import numpy as np


class SomAnnotateError(Exception):
    """Base class for all structured errors raised by this package."""


class EmptyRegion(SomAnnotateError):
    """An operation needed at least one foreground pixel."""


class GridMismatch(SomAnnotateError):
    """Operands do not share the same grid dimensions."""


class BothEmpty(SomAnnotateError):
    """IoU of two empty pixel sets is 0/0 and deliberately undefined."""


class FeatureKind(str, Enum):
    """Urban feature a pipeline run is bound to."""

    STOP_LINE = "stop_line"
    RAISED_TABLE = "raised_table"

    @property
    def display_name(self) -> str:
        return self.value.replace("_", " ").title()


class Strategy(str, Enum):
    """Prompting strategy: direct baseline or one of the marked variants."""

    DP = "DP"
    NC = "NC"
    IC = "IC"
    COMB = "Comb"


SOM_STRATEGIES = (Strategy.NC, Strategy.IC, Strategy.COMB)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box; covers cells [x, x+w) x [y, y+h)."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ValueError(f"BBox.{name} must be an int, got {v!r}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"BBox origin must be non-negative, got ({self.x}, {self.y})")
        if self.w < 1 or self.h < 1:
            raise ValueError(f"BBox sides must be >= 1, got {self.w}x{self.h}")

    @property
    def x2(self) -> int:
        """Exclusive right edge."""
        return self.x + self.w

    @property
    def y2(self) -> int:
        """Exclusive bottom edge."""
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, values: Iterable[int]) -> "BBox":
        vals = list(values)
        if len(vals) != 4:
            raise ValueError(f"expected [x, y, w, h], got {vals!r}")
        return cls(*vals)


class PixelRegion:
    """A set of foreground pixels on a width x height grid.

    Backed by a read-only boolean mask in (row, col) order. Equality is
    exact mask equality, including grid dimensions.
    """

    __slots__ = ("_mask",)

    def __init__(self, mask: np.ndarray):
        arr = np.array(mask, dtype=bool, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"mask must be 2-D and non-degenerate, got shape {arr.shape}")
        arr.flags.writeable = False
        self._mask = arr

    @classmethod
    def empty(cls, width: int, height: int) -> "PixelRegion":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> "PixelRegion":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def from_pixels(cls, width: int, height: int,
                    pixels: Iterable[tuple[int, int]]) -> "PixelRegion":
        """Build from (row, col) coordinates; rejects out-of-grid pixels."""
        mask = np.zeros((height, width), dtype=bool)
        for row, col in pixels:
            if not (0 <= row < height and 0 <= col < width):
                raise ValueError(
                    f"pixel ({row}, {col}) outside {width}x{height} grid")
            mask[row, col] = True
        return cls(mask)

    @property
    def mask(self) -> np.ndarray:
        return self._mask

    @property
    def width(self) -> int:
        return self._mask.shape[1]

    @property
    def height(self) -> int:
        return self._mask.shape[0]

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self._mask))

    @property
    def grid(self) -> tuple[int, int]:
        return (self.width, self.height)

    def membership(self) -> frozenset[tuple[int, int]]:
        """The foreground pixel set as (row, col) pairs."""
        rows, cols = np.nonzero(self._mask)
        return frozenset((int(r), int(c)) for r, c in zip(rows, cols))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PixelRegion):
            return NotImplemented
        return self._mask.shape == other._mask.shape and bool(
            np.array_equal(self._mask, other._mask))

    def __hash__(self) -> int:
        return hash((self._mask.shape, self._mask.tobytes()))

    def __repr__(self) -> str:
        return f"PixelRegion({self.width}x{self.height}, area={self.area})"


class RasterImage:
    """8-bit RGB pixel grid, the unit of all rendering and filtering.

    Backed by a read-only uint8 array of shape (height, width, 3).
    """

    __slots__ = ("_array",)

    def __init__(self, array: np.ndarray):
        arr = np.array(array, dtype=np.uint8, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (height, width, 3) RGB array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def filled(cls, width: int, height: int,
               color: tuple[int, int, int] = (255, 255, 255)) -> "RasterImage":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[:, :] = color
        return cls(arr)

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def width(self) -> int:
        return self._array.shape[1]

    @property
    def height(self) -> int:
        return self._array.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return (self.width, self.height)

    def mutable_copy(self) -> np.ndarray:
        return self._array.copy()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self._array.shape == other._array.shape and bool(
            np.array_equal(self._array, other._array))

    def __hash__(self) -> int:
        return hash((self._array.shape, self._array.tobytes()))

    def __repr__(self) -> str:
        return f"RasterImage({self.width}x{self.height})"


RegionMember = Union[BBox, PixelRegion]


@dataclass(frozen=True)
class RegionSet:
    """Unordered members (boxes or pixel regions) on one common grid.

    Interpreted as the union of the members' pixel sets. Members may
    overlap; an empty member tuple is a valid (empty) set.
    """

    width: int
    height: int
    members: tuple[RegionMember, ...]

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        for member in self.members:
            if isinstance(member, BBox):
                if member.x2 > self.width or member.y2 > self.height:
                    raise GridMismatch(
                        f"box {member} exceeds {self.width}x{self.height} grid")
            elif isinstance(member, PixelRegion):
                if (member.width, member.height) != (self.width, self.height):
                    raise GridMismatch(
                        f"region grid {member.width}x{member.height} does not match "
                        f"set grid {self.width}x{self.height}")
            else:
                raise TypeError(f"unsupported member type {type(member).__name__}")

    @classmethod
    def from_boxes(cls, width: int, height: int,
                   boxes: Iterable[BBox]) -> "RegionSet":
        return cls(width, height, tuple(boxes))

    @property
    def grid(self) -> tuple[int, int]:
        return (self.width, self.height)


def region_area(region: PixelRegion) -> int:
    """Exact foreground pixel count."""
    return region.area


def bbox_of_region(region: PixelRegion) -> BBox:
    """Tightest box containing every member pixel of a nonempty region."""
    rows, cols = np.nonzero(region.mask)
    if rows.size == 0:
        raise EmptyRegion("cannot take the bounding box of an empty region")
    x = int(cols.min())
    y = int(rows.min())
    return BBox(x=x, y=y, w=int(cols.max()) - x + 1, h=int(rows.max()) - y + 1)


def union_pixels(regions: RegionSet) -> PixelRegion:
    """Union of all member pixel sets as one region on the set's grid."""
    acc = np.zeros((regions.height, regions.width), dtype=bool)
    for member in regions.members:
        if isinstance(member, BBox):
            acc[member.y:member.y2, member.x:member.x2] = True
        else:
            acc |= member.mask
    return PixelRegion(acc)


def _foreground(regions: "RegionSet | PixelRegion") -> np.ndarray:
    if isinstance(regions, PixelRegion):
        return regions.mask
    return union_pixels(regions).mask


def iou(g: "RegionSet | PixelRegion", p: "RegionSet | PixelRegion") -> Fraction:
    """Exact intersection-over-union of two region sets.

    Returns |pixels(g) & pixels(p)| / |pixels(g) | pixels(p)| as an exact
    rational built from integer pixel counts. Raises GridMismatch when the
    grids differ and BothEmpty when both sets are empty (0/0 must never be
    silently reported as 0 or 1). Pre-unioned PixelRegions are accepted in
    place of either set.
    """
    if g.grid != p.grid:
        raise GridMismatch(f"grids differ: {g.grid} vs {p.grid}")
    gm = _foreground(g)
    pm = _foreground(p)
    union_count = int(np.count_nonzero(gm | pm))
    if union_count == 0:
        raise BothEmpty("IoU of two empty region sets is undefined")
    inter_count = int(np.count_nonzero(gm & pm))
    return Fraction(inter_count, union_count)
