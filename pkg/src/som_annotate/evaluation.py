"""Evaluation harness: per-image IoU against ground truth, per-(feature,
strategy) mean tables, baseline ordering checks, and graded overlay
rendering.

All per-image scores are exact rationals from integer pixel counts;
means are exact rational averages and only become decimal strings at
formatting time (4 decimal places, banker's rounding).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal, localcontext
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Sequence

from .core import (
    BBox,
    FeatureKind,
    GridMismatch,
    RasterImage,
    RegionSet,
    SomAnnotateError,
    Strategy,
    bbox_of_region,
    iou,
    union_pixels,
)
from .masks import GroundTruthDoc, SchemaError, _require_keys
from .som import draw_box_outline


class IdMismatch(SomAnnotateError):
    """Record and ground truth disagree on image_id."""


class FeatureMismatch(SomAnnotateError):
    """Record and ground truth disagree on the target feature."""


class MissingGroundTruth(SomAnnotateError):
    """A record references an image with no ground-truth document."""


class IncompleteReport(SomAnnotateError):
    """An ordering check needs a (feature, strategy) mean the report lacks."""


@dataclass(frozen=True)
class AnnotationRecord:
    """One pipeline outcome: what was predicted for one image under one
    strategy, plus enough provenance to audit it.

    DP records never carry marks; SoM records carry exactly one mark per
    predicted box. A record with a note and an empty prediction is the
    normal shape for degenerate runs (no candidates, unparseable reply).
    """

    image_id: str
    feature: FeatureKind
    strategy: Strategy
    predicted: RegionSet
    marks: tuple[int, ...] = ()
    transcript_digest: str | None = None
    note: str | None = None

    def __post_init__(self) -> None:
        if self.strategy == Strategy.DP:
            if self.marks:
                raise ValueError("DP records carry no marks")
        elif len(self.marks) != len(self.predicted.members):
            raise ValueError(
                f"{len(self.marks)} mark(s) for {len(self.predicted.members)} "
                f"predicted box(es)")
        if len(set(self.marks)) != len(self.marks):
            raise ValueError(f"duplicate marks in {self.marks}")

    def to_json_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "feature": self.feature.value,
            "strategy": self.strategy.value,
            "width": self.predicted.width,
            "height": self.predicted.height,
            "boxes": [b.as_list() for b in self.predicted.members],
            "marks": list(self.marks),
            "transcript_digest": self.transcript_digest,
            "note": self.note,
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Any]) -> "AnnotationRecord":
        predicted = RegionSet.from_boxes(
            obj["width"], obj["height"],
            [BBox.from_list(b) for b in obj["boxes"]])
        return cls(
            image_id=obj["image_id"],
            feature=FeatureKind(obj["feature"]),
            strategy=Strategy(obj["strategy"]),
            predicted=predicted,
            marks=tuple(obj["marks"]),
            transcript_digest=obj.get("transcript_digest"),
            note=obj.get("note"),
        )


@dataclass(frozen=True)
class EvalRow:
    """One image's score under one (feature, strategy)."""

    image_id: str
    feature: FeatureKind
    strategy: Strategy
    iou: Fraction

    def __post_init__(self) -> None:
        if not 0 <= self.iou <= 1:
            raise ValueError(f"iou {self.iou} outside [0, 1]")


GroupKey = tuple[FeatureKind, Strategy]

_STRATEGY_ORDER = {s: i for i, s in enumerate(Strategy)}
_FEATURE_ORDER = {f: i for i, f in enumerate(FeatureKind)}


@dataclass(frozen=True)
class EvalReport:
    """Per-image rows plus derived per-group means and counts.

    Means and counts are always recomputed from the rows, so a
    serialized report can never drift from its own data.
    """

    rows: tuple[EvalRow, ...]

    def means(self) -> dict[GroupKey, Fraction]:
        totals: dict[GroupKey, Fraction] = {}
        counts = self.counts()
        for row in self.rows:
            key = (row.feature, row.strategy)
            totals[key] = totals.get(key, Fraction(0)) + row.iou
        return {key: total / counts[key] for key, total in totals.items()}

    def counts(self) -> dict[GroupKey, int]:
        counts: dict[GroupKey, int] = {}
        for row in self.rows:
            key = (row.feature, row.strategy)
            counts[key] = counts.get(key, 0) + 1
        return counts

    def features(self) -> tuple[FeatureKind, ...]:
        seen: dict[FeatureKind, None] = {}
        for row in sorted(self.rows, key=lambda r: _FEATURE_ORDER[r.feature]):
            seen.setdefault(row.feature)
        return tuple(seen)

    def to_json_dict(self) -> dict:
        return {
            "rows": [{
                "image_id": r.image_id,
                "feature": r.feature.value,
                "strategy": r.strategy.value,
                "iou": f"{r.iou.numerator}/{r.iou.denominator}",
            } for r in self.rows],
            "means": {
                feature.value: {
                    strategy.value: format_mean(mean)
                    for (f, strategy), mean in sorted(
                        self.means().items(),
                        key=lambda kv: _STRATEGY_ORDER[kv[0][1]])
                    if f == feature
                } for feature in self.features()
            },
            "counts": {
                feature.value: {
                    strategy.value: count
                    for (f, strategy), count in sorted(
                        self.counts().items(),
                        key=lambda kv: _STRATEGY_ORDER[kv[0][1]])
                    if f == feature
                } for feature in self.features()
            },
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Any]) -> "EvalReport":
        rows = []
        for entry in obj["rows"]:
            rows.append(EvalRow(
                image_id=entry["image_id"],
                feature=FeatureKind(entry["feature"]),
                strategy=Strategy(entry["strategy"]),
                iou=Fraction(entry["iou"]),
            ))
        return cls(rows=tuple(rows))


def format_mean(value: Fraction) -> str:
    """Exact rational -> 4-decimal string, banker's rounding."""
    with localcontext() as ctx:
        ctx.prec = 50
        quotient = Decimal(value.numerator) / Decimal(value.denominator)
        return str(quotient.quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN))


def evaluate_image(pred: AnnotationRecord, gt: GroundTruthDoc) -> Fraction:
    """Exact IoU of a record's prediction against its ground truth.

    An empty prediction against nonempty ground truth scores 0 by
    convention; it is not an error.
    """
    if pred.image_id != gt.image_id:
        raise IdMismatch(
            f"record is for {pred.image_id!r}, ground truth for {gt.image_id!r}")
    if pred.feature != gt.feature:
        raise FeatureMismatch(
            f"record is for {pred.feature.value}, ground truth for {gt.feature.value}")
    gt_pixels = union_pixels(gt.regions)
    if pred.predicted.width != gt.regions.width or pred.predicted.height != gt.regions.height:
        raise GridMismatch(
            f"prediction grid {pred.predicted.width}x{pred.predicted.height} vs "
            f"ground truth grid {gt.regions.width}x{gt.regions.height}")
    pred_pixels = union_pixels(pred.predicted)
    if pred_pixels.area == 0 and gt_pixels.area > 0:
        return Fraction(0)
    return iou(gt_pixels, pred_pixels)


def evaluate_dataset(records: Sequence[AnnotationRecord],
                     gts: Mapping[str, GroundTruthDoc]) -> EvalReport:
    """Score every record against its ground truth by image_id.

    Rows come out sorted by (feature, strategy, image_id) so two runs over
    the same records serialize identically.
    """
    missing = sorted({r.image_id for r in records if r.image_id not in gts})
    if missing:
        raise MissingGroundTruth(
            f"no ground truth for image id(s): {', '.join(missing)}")
    rows = [EvalRow(image_id=r.image_id, feature=r.feature, strategy=r.strategy,
                    iou=evaluate_image(r, gts[r.image_id]))
            for r in records]
    rows.sort(key=lambda r: (_FEATURE_ORDER[r.feature],
                             _STRATEGY_ORDER[r.strategy], r.image_id))
    return EvalReport(rows=tuple(rows))


@dataclass(frozen=True)
class OrderingVerdict:
    """Whether one feature's means satisfy DP < NC <= IC <= Comb.

    Margins are (NC - DP, IC - NC, Comb - IC); the verdict is true when
    the first is positive and the other two are non-negative.
    """

    feature: FeatureKind
    ok: bool
    margins: tuple[Fraction, Fraction, Fraction]


def ordering_check(report: EvalReport) -> dict[FeatureKind, OrderingVerdict]:
    """Check the strategy ordering for every feature present in the report."""
    means = report.means()
    verdicts: dict[FeatureKind, OrderingVerdict] = {}
    for feature in report.features():
        values = {}
        for strategy in Strategy:
            key = (feature, strategy)
            if key not in means:
                raise IncompleteReport(
                    f"feature {feature.value} has no {strategy.value} mean")
            values[strategy] = means[key]
        margins = (values[Strategy.NC] - values[Strategy.DP],
                   values[Strategy.IC] - values[Strategy.NC],
                   values[Strategy.COMB] - values[Strategy.IC])
        ok = margins[0] > 0 and margins[1] >= 0 and margins[2] >= 0
        verdicts[feature] = OrderingVerdict(feature=feature, ok=ok, margins=margins)
    return verdicts


@dataclass(frozen=True)
class OverlayThresholds:
    """IoU cutoffs for grading an overlay; exact rational boundaries."""

    t_perfect: Fraction = Fraction(3, 4)
    t_approx: Fraction = Fraction(1, 10)

    def __post_init__(self) -> None:
        if not 0 <= self.t_approx <= self.t_perfect <= 1:
            raise ValueError(
                f"need 0 <= t_approx <= t_perfect <= 1, got "
                f"{self.t_approx}, {self.t_perfect}")


OVERLAY_PERFECT = (0, 176, 0)
OVERLAY_APPROX = (230, 180, 0)
OVERLAY_POOR = (220, 0, 0)
OVERLAY_GT = (0, 90, 255)


def overlay_grade(score: Fraction,
                  thresholds: OverlayThresholds = OverlayThresholds()) -> tuple[int, int, int]:
    """Outline color for a per-image IoU under the grading thresholds."""
    if score >= thresholds.t_perfect:
        return OVERLAY_PERFECT
    if score >= thresholds.t_approx:
        return OVERLAY_APPROX
    return OVERLAY_POOR


def overlay_render(image: RasterImage, gt: RegionSet, pred: RegionSet,
                   thresholds: OverlayThresholds = OverlayThresholds()) -> RasterImage:
    """Draw ground truth and graded prediction outlines on a copy.

    Ground truth is outlined in a fixed blue; every prediction outline
    takes the single color graded from the image's overall IoU.
    """
    if gt.grid != image.grid or pred.grid != image.grid:
        raise GridMismatch(
            f"image grid {image.grid} vs gt {gt.grid} and pred {pred.grid}")
    pred_pixels = union_pixels(pred)
    if pred_pixels.area == 0:
        score = Fraction(0)
    else:
        score = iou(union_pixels(gt), pred_pixels)
    color = overlay_grade(score, thresholds)
    canvas = image.mutable_copy()
    for member in gt.members:
        box = member if isinstance(member, BBox) else bbox_of_region(member)
        draw_box_outline(canvas, box, OVERLAY_GT)
    for member in pred.members:
        box = member if isinstance(member, BBox) else bbox_of_region(member)
        draw_box_outline(canvas, box, color)
    return RasterImage(canvas)


_TABLE_FEATURES = (FeatureKind.STOP_LINE, FeatureKind.RAISED_TABLE)


def format_report_table(report: EvalReport) -> str:
    """Aligned plain-text mean table, one feature per row, strategies as
    columns. Missing cells render as a dash."""
    means = report.means()
    features = [f for f in _TABLE_FEATURES if f in report.features()]
    features += [f for f in report.features() if f not in features]
    header = ["Feature"] + [s.value for s in Strategy]
    lines = [header]
    for feature in features:
        cells = [feature.display_name]
        for strategy in Strategy:
            mean = means.get((feature, strategy))
            cells.append(format_mean(mean) if mean is not None else "-")
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    rendered = []
    for line in lines:
        cells = [line[0].ljust(widths[0])]
        cells += [line[i].rjust(widths[i]) for i in range(1, len(widths))]
        rendered.append("  ".join(cells).rstrip())
    return "\n".join(rendered) + "\n"


def load_report_fixture(data: bytes) -> EvalReport:
    """Build a report from a published-means fixture file.

    The fixture stores one decimal mean per (feature, strategy); each
    becomes a single synthetic row with that exact value, so the loaded
    report's recomputed means reproduce the published table verbatim.
    """
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"fixture is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError(f"fixture root must be an object, got {type(obj).__name__}")
    _require_keys(obj, {"means"}, {"source", "description"}, "fixture")
    means = obj["means"]
    if not isinstance(means, dict):
        raise SchemaError("fixture means must be an object")
    rows = []
    for feature_name, per_strategy in means.items():
        feature = FeatureKind(feature_name)
        if not isinstance(per_strategy, dict):
            raise SchemaError(f"means for {feature_name} must be an object")
        for strategy_name, text in per_strategy.items():
            strategy = Strategy(strategy_name)
            rows.append(EvalRow(
                image_id=f"published:{feature.value}:{strategy.value}",
                feature=feature,
                strategy=strategy,
                iou=Fraction(str(text)),
            ))
    rows.sort(key=lambda r: (_FEATURE_ORDER[r.feature],
                             _STRATEGY_ORDER[r.strategy], r.image_id))
    return EvalReport(rows=tuple(rows))


def load_report_fixture_file(path: Path | str) -> EvalReport:
    return load_report_fixture(Path(path).read_bytes())
