"""Segmentation mask ingest: run-length coding plus document parsing.

The interchange format is plain JSON. A mask document carries one RLE per
segment; run counts alternate background/foreground in row-major scan
order, background first (a run of zero background pixels is encoded as a
single leading zero). Ground-truth files carry boxes and optional RLE
regions on a declared grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .core import (
    BBox,
    FeatureKind,
    GridMismatch,
    PixelRegion,
    RegionMember,
    RegionSet,
    SomAnnotateError,
    bbox_of_region,
)


class MalformedCounts(SomAnnotateError):
    """RLE counts violate the canonical form (negative or misplaced zeros)."""


class LengthMismatch(SomAnnotateError):
    """RLE counts do not sum to the grid's pixel count."""


class SchemaError(SomAnnotateError):
    """Document bytes do not satisfy the JSON schema."""


class HintMismatch(SchemaError):
    """A segment's bbox or area hint disagrees with its decoded pixels."""


class DuplicateSegmentId(SchemaError):
    """Two segments in one document share an id."""


class EmptyGroundTruth(SchemaError):
    """A ground-truth document carries no annotated pixels."""


@dataclass(frozen=True)
class RunLengthEncoding:
    """Alternating background/foreground run lengths, background first.

    Canonical form: every count is positive except an optional single
    leading zero (used when pixel 0 is foreground). Zero counts anywhere
    else would denote empty runs and are rejected.
    """

    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        counts = tuple(self.counts)
        object.__setattr__(self, "counts", counts)
        for i, c in enumerate(counts):
            if not isinstance(c, int) or isinstance(c, bool):
                raise MalformedCounts(f"count at index {i} is not an int: {c!r}")
            if c < 0:
                raise MalformedCounts(f"negative count {c} at index {i}")
            if c == 0 and i > 0:
                raise MalformedCounts(f"zero count at index {i}; only a leading zero is allowed")


def decode_rle(rle: RunLengthEncoding, width: int, height: int) -> PixelRegion:
    """Expand runs into a pixel region; row-major, background first."""
    if width < 1 or height < 1:
        raise ValueError(f"grid must be at least 1x1, got {width}x{height}")
    total = sum(rle.counts)
    if total != width * height:
        raise LengthMismatch(
            f"counts sum to {total}, expected {width * height} for {width}x{height}")
    flat = np.zeros(width * height, dtype=bool)
    pos = 0
    foreground = False
    for count in rle.counts:
        if foreground:
            flat[pos:pos + count] = True
        pos += count
        foreground = not foreground
    return PixelRegion(flat.reshape(height, width))


def encode_rle(region: PixelRegion) -> RunLengthEncoding:
    """Canonical inverse of decode_rle: decode_rle(encode_rle(r)) == r."""
    flat = region.mask.ravel()
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], changes, [flat.size]))
    counts = [int(n) for n in np.diff(starts)]
    if flat[0]:
        counts.insert(0, 0)
    return RunLengthEncoding(tuple(counts))


@dataclass(frozen=True)
class Segment:
    """One segmented object: a stable id and its foreground pixels."""

    id: int
    region: PixelRegion


@dataclass(frozen=True)
class MaskDocument:
    """All segments produced for one image, on one grid."""

    image_id: str
    width: int
    height: int
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for segment in self.segments:
            if segment.id in seen:
                raise DuplicateSegmentId(f"segment id {segment.id} appears twice")
            seen.add(segment.id)
            if segment.region.grid != (self.width, self.height):
                raise SchemaError(
                    f"segment {segment.id} is on grid {segment.region.grid}, "
                    f"document grid is {(self.width, self.height)}")


@dataclass(frozen=True)
class GroundTruthDoc:
    """Manually annotated truth for one image and one feature."""

    image_id: str
    feature: FeatureKind
    regions: RegionSet

    def __post_init__(self) -> None:
        if not self.regions.members:
            raise EmptyGroundTruth(
                f"ground truth for {self.image_id!r} has no regions")


def _require_keys(obj: Mapping[str, Any], required: set[str], optional: set[str],
                  where: str) -> None:
    keys = set(obj)
    missing = required - keys
    extra = keys - required - optional
    if missing:
        raise SchemaError(f"{where}: missing required field(s) {sorted(missing)}")
    if extra:
        raise SchemaError(f"{where}: unexpected field(s) {sorted(extra)}")


def _as_int(value: Any, where: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise SchemaError(f"{where}: expected an integer, got {value!r}")
    return value


def _as_str(value: Any, where: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(f"{where}: expected a string, got {value!r}")
    return value


def _as_json_object(data: bytes, what: str) -> dict[str, Any]:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SchemaError(f"{what} is not valid UTF-8: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{what} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError(f"{what} must be a JSON object, got {type(obj).__name__}")
    return obj


def _counts_from_json(value: Any, where: str) -> RunLengthEncoding:
    if not isinstance(value, list):
        raise SchemaError(f"{where}: counts must be a list")
    counts = tuple(_as_int(c, f"{where}.counts") for c in value)
    try:
        return RunLengthEncoding(counts)
    except MalformedCounts as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def parse_mask_document(data: bytes) -> MaskDocument:
    """Parse and fully validate a mask document.

    Every segment is decoded; bbox/area hints, when present, must match
    the decoded pixels exactly. Zero-area segments and duplicate ids are
    rejected. Any violation raises a SchemaError subclass; arbitrary input
    bytes never crash the parser.
    """
    obj = _as_json_object(data, "mask document")
    _require_keys(obj, {"image_id", "width", "height", "segments"}, set(), "mask document")
    image_id = _as_str(obj["image_id"], "image_id")
    width = _as_int(obj["width"], "width")
    height = _as_int(obj["height"], "height")
    if width < 1 or height < 1:
        raise SchemaError(f"grid must be at least 1x1, got {width}x{height}")
    if not isinstance(obj["segments"], list):
        raise SchemaError("segments must be a list")

    segments: list[Segment] = []
    seen_ids: set[int] = set()
    for index, seg_obj in enumerate(obj["segments"]):
        where = f"segments[{index}]"
        if not isinstance(seg_obj, dict):
            raise SchemaError(f"{where}: expected an object")
        _require_keys(seg_obj, {"id", "counts"}, {"bbox", "area"}, where)
        seg_id = _as_int(seg_obj["id"], f"{where}.id")
        if seg_id < 1:
            raise SchemaError(f"{where}: segment id must be >= 1, got {seg_id}")
        if seg_id in seen_ids:
            raise DuplicateSegmentId(f"duplicate segment id {seg_id}")
        seen_ids.add(seg_id)

        rle = _counts_from_json(seg_obj["counts"], where)
        try:
            region = decode_rle(rle, width, height)
        except LengthMismatch as exc:
            raise SchemaError(f"{where}: {exc}") from exc
        if region.area == 0:
            raise SchemaError(f"{where}: segment {seg_id} decodes to zero pixels")

        if "area" in seg_obj:
            hinted = _as_int(seg_obj["area"], f"{where}.area")
            if hinted != region.area:
                raise HintMismatch(
                    f"{where}: area hint {hinted} != decoded area {region.area}")
        if "bbox" in seg_obj:
            hinted_bbox = _bbox_from_json(seg_obj["bbox"], f"{where}.bbox")
            actual = bbox_of_region(region)
            if hinted_bbox != actual:
                raise HintMismatch(
                    f"{where}: bbox hint {hinted_bbox.as_list()} != decoded "
                    f"{actual.as_list()}")

        segments.append(Segment(id=seg_id, region=region))

    return MaskDocument(image_id=image_id, width=width, height=height,
                        segments=tuple(segments))


def _bbox_from_json(value: Any, where: str) -> BBox:
    if not isinstance(value, list) or len(value) != 4:
        raise SchemaError(f"{where}: expected [x, y, w, h]")
    x, y, w, h = (_as_int(v, where) for v in value)
    try:
        return BBox(x=x, y=y, w=w, h=h)
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def load_ground_truth(data: bytes) -> GroundTruthDoc:
    """Parse a ground-truth document into regions on its declared grid."""
    obj = _as_json_object(data, "ground truth")
    _require_keys(obj, {"image_id", "feature", "width", "height", "boxes"},
                  {"rle_regions"}, "ground truth")
    image_id = _as_str(obj["image_id"], "image_id")
    feature_name = _as_str(obj["feature"], "feature")
    try:
        feature = FeatureKind(feature_name)
    except ValueError as exc:
        known = sorted(k.value for k in FeatureKind)
        raise SchemaError(f"unknown feature {feature_name!r}; known: {known}") from exc
    width = _as_int(obj["width"], "width")
    height = _as_int(obj["height"], "height")
    if width < 1 or height < 1:
        raise SchemaError(f"grid must be at least 1x1, got {width}x{height}")

    members: list[RegionMember] = []
    if not isinstance(obj["boxes"], list):
        raise SchemaError("boxes must be a list")
    for i, box_obj in enumerate(obj["boxes"]):
        members.append(_bbox_from_json(box_obj, f"boxes[{i}]"))

    rle_regions = obj.get("rle_regions", [])
    if not isinstance(rle_regions, list):
        raise SchemaError("rle_regions must be a list")
    for i, rle_obj in enumerate(rle_regions):
        where = f"rle_regions[{i}]"
        if not isinstance(rle_obj, dict):
            raise SchemaError(f"{where}: expected an object")
        _require_keys(rle_obj, {"counts"}, set(), where)
        rle = _counts_from_json(rle_obj["counts"], where)
        try:
            region = decode_rle(rle, width, height)
        except LengthMismatch as exc:
            raise SchemaError(f"{where}: {exc}") from exc
        if region.area == 0:
            raise SchemaError(f"{where}: region decodes to zero pixels")
        members.append(region)

    if not members:
        raise EmptyGroundTruth(f"ground truth for {image_id!r} has no regions")
    try:
        regions = RegionSet(width=width, height=height, members=tuple(members))
    except GridMismatch as exc:
        raise SchemaError(str(exc)) from exc
    return GroundTruthDoc(image_id=image_id, feature=feature, regions=regions)
