"""Candidate filtering: drop segments by color class and minimum area,
then assign integer marks to the survivors in reading order.

Color classification works on the channel-wise median RGB of a segment's
member pixels, converted to HSV. The median resists anti-aliased edge
pixels, which matters for thin road markings. Road paint of interest is
white or gray, so low saturation or very low value maps to Neutral; the
excluded classes cover vegetation, dirt, and roof tones.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .core import (
    BBox,
    EmptyRegion,
    FeatureKind,
    GridMismatch,
    PixelRegion,
    RasterImage,
    bbox_of_region,
)
from .masks import Segment


class ColorClass(str, Enum):
    GREEN = "green"
    YELLOW = "yellow"
    BROWN = "brown"
    RED = "red"
    NEUTRAL = "neutral"
    OTHER = "other"


DEFAULT_MIN_AREA: Mapping[FeatureKind, int] = {
    FeatureKind.STOP_LINE: 200,
    FeatureKind.RAISED_TABLE: 400,
}

DEFAULT_EXCLUDED_COLORS = frozenset(
    {ColorClass.GREEN, ColorClass.YELLOW, ColorClass.BROWN, ColorClass.RED})


@dataclass(frozen=True)
class HsvThresholds:
    """HSV decision boundaries for classify_color; hue in degrees [0, 360)."""

    neutral_max_saturation: float = 0.20
    neutral_max_value: float = 0.15
    red_hue_below: float = 15.0
    red_hue_from: float = 345.0
    yellow_hue_from: float = 45.0
    yellow_hue_below: float = 70.0
    green_hue_from: float = 70.0
    green_hue_below: float = 170.0
    brown_hue_from: float = 15.0
    brown_hue_below: float = 45.0
    brown_max_value: float = 0.70


@dataclass(frozen=True)
class FilterConfig:
    """Per-feature area floors plus the excluded color classes."""

    min_area_by_feature: Mapping[FeatureKind, int] = field(
        default_factory=lambda: dict(DEFAULT_MIN_AREA))
    excluded_colors: frozenset[ColorClass] = DEFAULT_EXCLUDED_COLORS
    hsv: HsvThresholds = field(default_factory=HsvThresholds)

    def __post_init__(self) -> None:
        for feature, min_area in self.min_area_by_feature.items():
            if min_area < 1:
                raise ValueError(
                    f"min area for {feature.value} must be >= 1, got {min_area}")

    def min_area_for(self, feature: FeatureKind) -> int:
        try:
            return self.min_area_by_feature[feature]
        except KeyError:
            raise ValueError(
                f"no minimum-area threshold configured for feature "
                f"{feature.value!r}") from None


@dataclass(frozen=True)
class Candidate:
    """A surviving segment carrying its assigned mark."""

    mark: int
    segment_id: int
    region: PixelRegion
    bbox: BBox
    color: ColorClass

    def __post_init__(self) -> None:
        if self.mark < 1:
            raise ValueError(f"mark must be >= 1, got {self.mark}")
        if self.bbox != bbox_of_region(self.region):
            raise ValueError(
                f"candidate bbox {self.bbox.as_list()} is not the tight bbox "
                f"of its region")


def classify_color(region: PixelRegion, image: RasterImage,
                   cfg: FilterConfig) -> ColorClass:
    """Classify a region by the HSV of its channel-wise median RGB."""
    if region.area == 0:
        raise EmptyRegion("cannot classify the color of an empty region")
    if (region.width, region.height) != image.grid:
        raise GridMismatch(
            f"region grid {region.width}x{region.height} does not match image "
            f"{image.width}x{image.height}")
    pixels = image.array[region.mask]
    median = np.median(pixels, axis=0)
    r, g, b = (float(v) / 255.0 for v in median)
    hue, sat, val = colorsys.rgb_to_hsv(r, g, b)
    return _classify_hsv(hue * 360.0, sat, val, cfg.hsv)


def _classify_hsv(hue: float, sat: float, val: float,
                  t: HsvThresholds) -> ColorClass:
    if sat < t.neutral_max_saturation or val < t.neutral_max_value:
        return ColorClass.NEUTRAL
    if hue < t.red_hue_below or hue >= t.red_hue_from:
        return ColorClass.RED
    if t.yellow_hue_from <= hue < t.yellow_hue_below:
        return ColorClass.YELLOW
    if t.green_hue_from <= hue < t.green_hue_below:
        return ColorClass.GREEN
    if t.brown_hue_from <= hue < t.brown_hue_below and val < t.brown_max_value:
        return ColorClass.BROWN
    return ColorClass.OTHER


def assign_marks(survivors: Sequence[tuple[Segment, ColorClass]]) -> list[Candidate]:
    """Number survivors 1..n in reading order.

    Sort key is the bbox top-left (y, then x), with segment id as the
    final tiebreak, so marking never depends on input order.
    """
    keyed = []
    for segment, color in survivors:
        bbox = bbox_of_region(segment.region)
        keyed.append(((bbox.y, bbox.x, segment.id), segment, bbox, color))
    keyed.sort(key=lambda item: item[0])
    return [
        Candidate(mark=i, segment_id=segment.id, region=segment.region,
                  bbox=bbox, color=color)
        for i, (_, segment, bbox, color) in enumerate(keyed, start=1)
    ]


def apply_filters(segments: Sequence[Segment], feature: FeatureKind,
                  image: RasterImage, cfg: FilterConfig) -> list[Candidate]:
    """Keep segments meeting the area floor whose color is not excluded.

    The result is marked in reading order and is a pure function of the
    segment set: permuting the input yields the identical output. An empty
    result is valid.
    """
    min_area = cfg.min_area_for(feature)
    survivors: list[tuple[Segment, ColorClass]] = []
    for segment in segments:
        if segment.region.area < min_area:
            continue
        color = classify_color(segment.region, image, cfg)
        if color in cfg.excluded_colors:
            continue
        survivors.append((segment, color))
    return assign_marks(survivors)
