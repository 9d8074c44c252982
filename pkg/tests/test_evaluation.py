"""Per-image scoring, mean tables, ordering checks, and overlays."""

import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from som_annotate.core import (
    BBox,
    FeatureKind,
    GridMismatch,
    RasterImage,
    RegionSet,
    Strategy,
    iou,
    union_pixels,
)
from som_annotate.evaluation import (
    OVERLAY_APPROX,
    OVERLAY_GT,
    OVERLAY_PERFECT,
    OVERLAY_POOR,
    AnnotationRecord,
    EvalReport,
    EvalRow,
    FeatureMismatch,
    IdMismatch,
    IncompleteReport,
    MissingGroundTruth,
    OverlayThresholds,
    evaluate_dataset,
    evaluate_image,
    format_mean,
    format_report_table,
    load_report_fixture,
    load_report_fixture_file,
    ordering_check,
    overlay_grade,
    overlay_render,
)
from som_annotate.masks import GroundTruthDoc, SchemaError

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

STOP = FeatureKind.STOP_LINE
TABLE = FeatureKind.RAISED_TABLE


def record(image_id: str = "img", feature: FeatureKind = STOP,
           strategy: Strategy = Strategy.COMB, boxes=((2, 2, 4, 4),),
           width: int = 20, height: int = 20, **kwargs) -> AnnotationRecord:
    predicted = RegionSet.from_boxes(width, height, [BBox(*b) for b in boxes])
    if strategy != Strategy.DP and "marks" not in kwargs:
        kwargs["marks"] = tuple(range(1, len(boxes) + 1))
    return AnnotationRecord(image_id=image_id, feature=feature,
                            strategy=strategy, predicted=predicted, **kwargs)


def truth(image_id: str = "img", feature: FeatureKind = STOP,
          boxes=((2, 2, 4, 4),), width: int = 20,
          height: int = 20) -> GroundTruthDoc:
    regions = RegionSet.from_boxes(width, height, [BBox(*b) for b in boxes])
    return GroundTruthDoc(image_id=image_id, feature=feature, regions=regions)


class TestAnnotationRecord:
    def test_dp_carries_no_marks(self):
        with pytest.raises(ValueError):
            record(strategy=Strategy.DP, marks=(1,))
        assert record(strategy=Strategy.DP).marks == ()

    def test_som_marks_match_box_count(self):
        with pytest.raises(ValueError):
            record(strategy=Strategy.NC, boxes=((0, 0, 2, 2),), marks=(1, 2))

    def test_duplicate_marks_rejected(self):
        with pytest.raises(ValueError):
            record(boxes=((0, 0, 2, 2), (5, 5, 2, 2)), marks=(3, 3))

    def test_json_round_trip(self):
        original = record(boxes=((1, 2, 3, 4), (7, 7, 2, 2)), marks=(2, 5),
                          transcript_digest="a" * 64, note="x")
        encoded = json.loads(json.dumps(original.to_json_dict()))
        assert AnnotationRecord.from_json_dict(encoded) == original


class TestEvaluateImage:
    def test_exact_match_scores_one(self):
        assert evaluate_image(record(), truth()) == 1

    def test_empty_prediction_scores_zero(self):
        assert evaluate_image(record(boxes=(), marks=()), truth()) == 0

    def test_quarter_overlap_example(self):
        pred = record(boxes=((5, 5, 10, 10),), width=30, height=30)
        gt = truth(boxes=((0, 0, 10, 10),), width=30, height=30)
        assert evaluate_image(pred, gt) == Fraction(25, 175)

    def test_delegates_to_exact_iou(self):
        pred = record(boxes=((3, 1, 9, 6),), width=30, height=30)
        gt = truth(boxes=((0, 0, 10, 10), (12, 2, 5, 5)), width=30, height=30)
        expected = iou(union_pixels(gt.regions), union_pixels(pred.predicted))
        assert evaluate_image(pred, gt) == expected

    def test_id_mismatch(self):
        with pytest.raises(IdMismatch):
            evaluate_image(record(image_id="a"), truth(image_id="b"))

    def test_feature_mismatch(self):
        with pytest.raises(FeatureMismatch):
            evaluate_image(record(feature=STOP), truth(feature=TABLE))

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatch):
            evaluate_image(record(width=20, height=20),
                           truth(width=30, height=30))


class TestEvaluateDataset:
    def test_group_mean(self):
        gts = {"a": truth("a", boxes=((0, 0, 10, 1),), width=40, height=10),
               "b": truth("b", boxes=((0, 0, 10, 1),), width=40, height=10)}
        # iou 2/10 -> expand denominator: pred covers 2 of 10 gt pixels
        recs = [
            record("a", boxes=((0, 0, 2, 1),), width=40, height=10),
            record("b", boxes=((0, 0, 4, 1),), width=40, height=10),
        ]
        report = evaluate_dataset(recs, gts)
        mean = report.means()[(STOP, Strategy.COMB)]
        assert mean == (Fraction(2, 10) + Fraction(4, 10)) / 2
        assert mean == Fraction(3, 10)
        assert report.counts()[(STOP, Strategy.COMB)] == 2

    def test_empty_records_empty_report(self):
        report = evaluate_dataset([], {})
        assert report.rows == ()
        assert report.means() == {}

    def test_missing_ground_truth_lists_ids(self):
        with pytest.raises(MissingGroundTruth) as err:
            evaluate_dataset([record("z2"), record("z1")], {})
        assert "z1, z2" in str(err.value)

    def test_rows_sorted_for_stable_serialization(self):
        gts = {i: truth(i) for i in ("a", "b")}
        recs = [record("b", strategy=Strategy.NC),
                record("a", strategy=Strategy.DP, boxes=()),
                record("a", strategy=Strategy.NC)]
        report = evaluate_dataset(recs, gts)
        keys = [(r.strategy, r.image_id) for r in report.rows]
        assert keys == [(Strategy.DP, "a"), (Strategy.NC, "a"),
                        (Strategy.NC, "b")]


@given(order=st.permutations(list(range(5))))
@settings(max_examples=30, deadline=None)
def test_means_permutation_invariant(order):
    gts = {f"i{k}": truth(f"i{k}", boxes=((0, 0, 10, 1),), width=40, height=10)
           for k in range(5)}
    recs = [record(f"i{k}", boxes=((0, 0, k + 1, 1),), width=40, height=10)
            for k in range(5)]
    baseline = evaluate_dataset(recs, gts)
    shuffled = evaluate_dataset([recs[i] for i in order], gts)
    assert shuffled.means() == baseline.means()
    assert shuffled.rows == baseline.rows


class TestEvalReport:
    def test_serialization_lossless(self):
        rows = (EvalRow("a", STOP, Strategy.DP, Fraction(0)),
                EvalRow("a", STOP, Strategy.NC, Fraction(1, 3)),
                EvalRow("b", TABLE, Strategy.COMB, Fraction(7, 9)))
        report = EvalReport(rows=rows)
        encoded = json.loads(json.dumps(report.to_json_dict()))
        assert EvalReport.from_json_dict(encoded) == report

    def test_serialized_means_match_published_format(self):
        report = EvalReport(rows=(
            EvalRow("a", STOP, Strategy.DP, Fraction(1, 3)),))
        assert report.to_json_dict()["means"] == {"stop_line": {"DP": "0.3333"}}

    def test_row_iou_bounds(self):
        with pytest.raises(ValueError):
            EvalRow("a", STOP, Strategy.DP, Fraction(7, 5))


class TestFormatMean:
    @pytest.mark.parametrize("value,expected", [
        (Fraction(0), "0.0000"),
        (Fraction(1), "1.0000"),
        (Fraction(1, 3), "0.3333"),
        (Fraction(2, 3), "0.6667"),
        (Fraction(2483, 10000), "0.2483"),
        (Fraction(25, 100000), "0.0002"),  # tie rounds to even
        (Fraction(75, 100000), "0.0008"),
        (Fraction(15, 100000), "0.0002"),
    ])
    def test_four_decimals_bankers_rounding(self, value, expected):
        assert format_mean(value) == expected


def synthetic_report(stop_means: dict, table_means: dict = ()) -> EvalReport:
    rows = []
    for feature, means in ((STOP, stop_means), (TABLE, dict(table_means))):
        for strategy, value in means.items():
            rows.append(EvalRow(f"s:{feature.value}:{strategy.value}",
                                feature, strategy, Fraction(value)))
    return EvalReport(rows=tuple(rows))


class TestOrderingCheck:
    def test_published_fixture_passes_both_features(self):
        report = load_report_fixture_file(FIXTURES / "table2.json")
        verdicts = ordering_check(report)
        assert set(verdicts) == {STOP, TABLE}
        for verdict in verdicts.values():
            assert verdict.ok
            assert verdict.margins[0] > 0

    def test_inverted_pair_fails_with_negative_margin(self):
        report = synthetic_report({Strategy.DP: "0.1", Strategy.NC: "0.5",
                                   Strategy.IC: "0.3", Strategy.COMB: "0.6"})
        verdict = ordering_check(report)[STOP]
        assert not verdict.ok
        assert verdict.margins[1] == Fraction("-0.2")

    def test_equal_nc_ic_still_passes(self):
        report = synthetic_report({Strategy.DP: "0.1", Strategy.NC: "0.4",
                                   Strategy.IC: "0.4", Strategy.COMB: "0.4"})
        assert ordering_check(report)[STOP].ok

    def test_dp_must_be_strictly_below_nc(self):
        report = synthetic_report({Strategy.DP: "0.4", Strategy.NC: "0.4",
                                   Strategy.IC: "0.5", Strategy.COMB: "0.6"})
        assert not ordering_check(report)[STOP].ok

    def test_missing_strategy_is_incomplete(self):
        report = synthetic_report({Strategy.DP: "0.1", Strategy.NC: "0.4",
                                   Strategy.IC: "0.5"})
        with pytest.raises(IncompleteReport):
            ordering_check(report)


class TestOverlayGrade:
    @pytest.mark.parametrize("score,color", [
        (Fraction(1), OVERLAY_PERFECT),
        (Fraction(3, 4), OVERLAY_PERFECT),    # boundary is inclusive
        (Fraction(25, 175), OVERLAY_APPROX),
        (Fraction(1, 10), OVERLAY_APPROX),
        (Fraction(9, 100), OVERLAY_POOR),
        (Fraction(0), OVERLAY_POOR),
    ])
    def test_default_thresholds(self, score, color):
        assert overlay_grade(score) == color

    def test_threshold_ordering_validated(self):
        with pytest.raises(ValueError):
            OverlayThresholds(t_perfect=Fraction(1, 10), t_approx=Fraction(3, 4))


def gray_image(width: int = 30, height: int = 30) -> RasterImage:
    return RasterImage.filled(width, height, (120, 120, 120))


def colors_in(image: RasterImage) -> set:
    return {tuple(px) for px in image.array.reshape(-1, 3)}


class TestOverlayRender:
    def test_identical_prediction_outlined_green(self):
        regions = RegionSet.from_boxes(30, 30, [BBox(5, 5, 10, 8)])
        out = overlay_render(gray_image(), regions, regions)
        assert OVERLAY_PERFECT in colors_in(out)
        assert OVERLAY_POOR not in colors_in(out)

    def test_disjoint_prediction_outlined_red(self):
        gt = RegionSet.from_boxes(30, 30, [BBox(2, 2, 6, 6)])
        pred = RegionSet.from_boxes(30, 30, [BBox(20, 20, 6, 6)])
        out = overlay_render(gray_image(), gt, pred)
        assert OVERLAY_POOR in colors_in(out)
        assert OVERLAY_GT in colors_in(out)

    def test_partial_overlap_outlined_yellow(self):
        gt = RegionSet.from_boxes(30, 30, [BBox(0, 0, 10, 10)])
        pred = RegionSet.from_boxes(30, 30, [BBox(5, 5, 10, 10)])
        out = overlay_render(gray_image(), gt, pred)  # iou 25/175
        assert OVERLAY_APPROX in colors_in(out)

    def test_untouched_pixels_survive(self):
        gt = RegionSet.from_boxes(30, 30, [BBox(2, 2, 6, 6)])
        pred = RegionSet.from_boxes(30, 30, [BBox(20, 20, 6, 6)])
        out = overlay_render(gray_image(), gt, pred)
        assert tuple(out.array[15, 15]) == (120, 120, 120)

    def test_grid_mismatch(self):
        regions = RegionSet.from_boxes(40, 40, [BBox(5, 5, 10, 8)])
        with pytest.raises(GridMismatch):
            overlay_render(gray_image(), regions, regions)

    def test_empty_prediction_draws_only_ground_truth(self):
        gt = RegionSet.from_boxes(30, 30, [BBox(2, 2, 6, 6)])
        pred = RegionSet(width=30, height=30, members=())
        out = overlay_render(gray_image(), gt, pred)
        assert OVERLAY_GT in colors_in(out)
        assert OVERLAY_POOR not in colors_in(out)


class TestFormatReportTable:
    def test_full_table_layout(self):
        report = load_report_fixture_file(FIXTURES / "table2.json")
        text = format_report_table(report)
        lines = text.splitlines()
        assert lines[0].split() == ["Feature", "DP", "NC", "IC", "Comb"]
        assert lines[1].split() == \
            ["Stop", "Line", "0.0000", "0.2483", "0.3354", "0.3657"]
        assert lines[2].split() == \
            ["Raised", "Table", "0.0190", "0.3315", "0.4069", "0.4189"]
        assert text.endswith("\n")

    def test_missing_cells_render_dash(self):
        report = synthetic_report({Strategy.NC: "0.5"})
        lines = format_report_table(report).splitlines()
        assert lines[1].split() == ["Stop", "Line", "-", "0.5000", "-", "-"]


class TestLoadReportFixture:
    def test_published_means_reproduced_exactly(self):
        report = load_report_fixture_file(FIXTURES / "table2.json")
        means = report.means()
        expected = {
            (STOP, Strategy.DP): "0.0000",
            (STOP, Strategy.NC): "0.2483",
            (STOP, Strategy.IC): "0.3354",
            (STOP, Strategy.COMB): "0.3657",
            (TABLE, Strategy.DP): "0.0190",
            (TABLE, Strategy.NC): "0.3315",
            (TABLE, Strategy.IC): "0.4069",
            (TABLE, Strategy.COMB): "0.4189",
        }
        assert {k: format_mean(v) for k, v in means.items()} == expected

    @pytest.mark.parametrize("payload", [
        b"not json",
        b"[]",
        b"{\"rows\": []}",
        b"{\"means\": {\"stop_line\": {\"DP\": \"0.1\"}}, \"extra\": 1}",
        b"{\"means\": 3}",
    ])
    def test_malformed_fixture(self, payload):
        with pytest.raises(SchemaError):
            load_report_fixture(payload)
