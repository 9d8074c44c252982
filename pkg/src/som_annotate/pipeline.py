"""End-to-end runs: annotate (ingest, filter, render, request, parse,
persist) and eval (score, report, overlays).

Images are processed by a bounded worker pool with per-image error
isolation: one bad image is reported and skipped, the rest still produce
records. Every intermediate artifact (candidate sidecars, SoM PNGs, mark
sidecars, transcripts, records) lands under the output directory so a run
can be audited or replayed later.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError, PipelineConfig
from .core import RasterImage, RegionSet, Strategy
from .evaluation import (
    AnnotationRecord,
    EvalReport,
    MissingGroundTruth,
    OverlayThresholds,
    evaluate_dataset,
    format_report_table,
    overlay_render,
)
from .filtering import Candidate, apply_filters
from .gateway import (
    MarkSelection,
    RateLimiter,
    TranscriptStore,
    UnparseableReply,
    VlmRequest,
    build_direct_prompt,
    build_prompt,
    parse_direct_boxes,
    parse_mark_selection,
    request_annotation,
    resolve_selection,
)
from .masks import GroundTruthDoc, load_ground_truth, parse_mask_document
from .som import SomBundle, mark_index_sidecar, render_bundle
from .raster_io import load_png, save_png, to_png_bytes

log = logging.getLogger(__name__)


@dataclass
class AnnotateOutcome:
    """Records produced plus per-image failures, keyed by image id."""

    records: list[AnnotationRecord]
    failures: dict[str, str]

    @property
    def ok(self) -> bool:
        return not self.failures


def discover_images(image_dir: Path) -> list[tuple[str, Path]]:
    """PNG files in the image dir, as (image_id, path), sorted by id."""
    return sorted((p.stem, p) for p in image_dir.glob("*.png"))


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", "utf-8")


def candidate_sidecar(image_id: str, image: RasterImage,
                      candidates: list[Candidate]) -> dict:
    """JSON-ready listing of surviving candidates by mark."""
    return {
        "image_id": image_id,
        "width": image.width,
        "height": image.height,
        "candidates": {str(c.mark): c.bbox.as_list() for c in candidates},
    }


def prepare_candidates(cfg: PipelineConfig, image_id: str,
                       image: RasterImage) -> list[Candidate]:
    """Ingest the image's mask document and run the filter stage."""
    assert cfg.paths.mask_dir is not None
    mask_path = cfg.paths.mask_dir / f"{image_id}.json"
    doc = parse_mask_document(mask_path.read_bytes())
    if doc.image_id != image_id:
        raise ValueError(
            f"mask document {mask_path} is for image {doc.image_id!r}")
    if (doc.width, doc.height) != image.grid:
        raise ValueError(
            f"mask grid {(doc.width, doc.height)} does not match image "
            f"grid {image.grid}")
    return apply_filters(doc.segments, cfg.feature, image, cfg.filter)


def persist_som_artifacts(cfg: PipelineConfig, image_id: str,
                          image: RasterImage, candidates: list[Candidate],
                          bundle: SomBundle | None) -> list[bytes]:
    """Write the candidate sidecar and any rendered SoM images; returns
    the PNG payloads in bundle order (what the gateway will send)."""
    som_dir = cfg.paths.out_dir / "som"
    som_dir.mkdir(parents=True, exist_ok=True)
    _write_json(som_dir / f"{image_id}.candidates.json",
                candidate_sidecar(image_id, image, candidates))
    payloads: list[bytes] = []
    if bundle is None:
        return payloads
    for marked in bundle.images:
        suffix = marked.strategy.value.lower()
        payload = to_png_bytes(marked.image)
        (som_dir / f"{image_id}.{suffix}.png").write_bytes(payload)
        _write_json(som_dir / f"{image_id}.{suffix}.marks.json",
                    mark_index_sidecar(marked))
        payloads.append(payload)
    return payloads


def _empty_record(cfg: PipelineConfig, image_id: str, image: RasterImage,
                  note: str, digest: str | None = None) -> AnnotationRecord:
    return AnnotationRecord(
        image_id=image_id,
        feature=cfg.feature,
        strategy=cfg.strategy,
        predicted=RegionSet.from_boxes(image.width, image.height, []),
        marks=(),
        transcript_digest=digest,
        note=note,
    )


def _annotate_direct(cfg: PipelineConfig, image_id: str, image: RasterImage,
                     image_path: Path, store: TranscriptStore | None,
                     limiter: RateLimiter) -> AnnotationRecord:
    prompt = build_direct_prompt(cfg.feature, image.width, image.height,
                                 cfg.templates, image_id=image_id)
    req = VlmRequest(endpoint=cfg.gateway.endpoint,
                     model_name=cfg.gateway.model_name,
                     prompt=prompt,
                     images=(image_path.read_bytes(),),
                     timeout_s=cfg.gateway.timeout_s,
                     max_retries=cfg.gateway.max_retries)
    transcript = request_annotation(req, cfg.gateway.mode, store, limiter,
                                    backoff_base=cfg.gateway.backoff_base_s)
    try:
        boxes = parse_direct_boxes(transcript.response_text,
                                   image.width, image.height)
    except UnparseableReply as exc:
        return _empty_record(cfg, image_id, image,
                             f"unparseable_reply: {exc}", transcript.digest)
    return AnnotationRecord(
        image_id=image_id,
        feature=cfg.feature,
        strategy=cfg.strategy,
        predicted=RegionSet.from_boxes(image.width, image.height, boxes),
        marks=(),
        transcript_digest=transcript.digest,
        note=None,
    )


def _annotate_som(cfg: PipelineConfig, image_id: str, image: RasterImage,
                  store: TranscriptStore | None,
                  limiter: RateLimiter) -> AnnotationRecord:
    candidates = prepare_candidates(cfg, image_id, image)
    if not candidates:
        persist_som_artifacts(cfg, image_id, image, candidates, None)
        return _empty_record(cfg, image_id, image, "no_candidates")
    bundle = render_bundle(image, candidates, cfg.strategy, cfg.layout)
    payloads = persist_som_artifacts(cfg, image_id, image, candidates, bundle)
    prompt = build_prompt(cfg.feature, cfg.strategy, len(candidates),
                          cfg.templates, image_id=image_id)
    req = VlmRequest(endpoint=cfg.gateway.endpoint,
                     model_name=cfg.gateway.model_name,
                     prompt=prompt,
                     images=tuple(payloads),
                     timeout_s=cfg.gateway.timeout_s,
                     max_retries=cfg.gateway.max_retries)
    transcript = request_annotation(req, cfg.gateway.mode, store, limiter,
                                    backoff_base=cfg.gateway.backoff_base_s)
    try:
        selection = parse_mark_selection(transcript.response_text,
                                         set(bundle.marks))
    except UnparseableReply as exc:
        return _empty_record(cfg, image_id, image,
                             f"unparseable_reply: {exc}", transcript.digest)
    chosen = selection.chosen if cfg.multi_mark else selection.chosen[:1]
    selection = MarkSelection(chosen=chosen, raw=selection.raw)
    boxes = resolve_selection(selection, candidates)
    return AnnotationRecord(
        image_id=image_id,
        feature=cfg.feature,
        strategy=cfg.strategy,
        predicted=RegionSet.from_boxes(image.width, image.height, boxes),
        marks=chosen,
        transcript_digest=transcript.digest,
        note=None,
    )


def _annotate_one(cfg: PipelineConfig, image_id: str, image_path: Path,
                  store: TranscriptStore | None,
                  limiter: RateLimiter) -> AnnotationRecord:
    image = load_png(image_path)
    if cfg.strategy == Strategy.DP:
        record = _annotate_direct(cfg, image_id, image, image_path, store, limiter)
    else:
        record = _annotate_som(cfg, image_id, image, store, limiter)
    _write_json(cfg.paths.out_dir / "records" / f"{image_id}.json",
                record.to_json_dict())
    return record


def run_annotate(cfg: PipelineConfig) -> AnnotateOutcome:
    """Annotate every image in the configured image dir.

    Per-image errors are collected, not fatal; only config-level problems
    (missing dirs, bad paths) raise.
    """
    cfg.validate_paths()
    images = discover_images(cfg.paths.image_dir)
    if not images:
        log.warning("no PNG images under %s", cfg.paths.image_dir)
    cfg.paths.out_dir.mkdir(parents=True, exist_ok=True)
    store = (TranscriptStore(cfg.paths.transcript_dir)
             if cfg.paths.transcript_dir is not None else None)
    limiter = RateLimiter(cfg.gateway.rate_limit_per_minute)
    records: dict[str, AnnotationRecord] = {}
    failures: dict[str, str] = {}

    def work(item: tuple[str, Path]) -> None:
        image_id, path = item
        try:
            records[image_id] = _annotate_one(cfg, image_id, path, store, limiter)
        except Exception as exc:
            log.error("image %s failed: %s", image_id, exc)
            failures[image_id] = f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        list(pool.map(work, images))
    if failures:
        log.warning("%d of %d image(s) failed: %s", len(failures),
                    len(images), ", ".join(sorted(failures)))
    ordered = [records[image_id] for image_id, _ in images if image_id in records]
    return AnnotateOutcome(records=ordered, failures=failures)


def load_records(records_dir: Path) -> list[AnnotationRecord]:
    records = []
    for path in sorted(records_dir.glob("*.json")):
        records.append(AnnotationRecord.from_json_dict(
            json.loads(path.read_text("utf-8"))))
    return records


def load_ground_truths(gt_dir: Path,
                       image_ids: list[str]) -> dict[str, GroundTruthDoc]:
    missing = [i for i in image_ids if not (gt_dir / f"{i}.json").exists()]
    if missing:
        raise MissingGroundTruth(
            f"no ground truth file for image id(s): {', '.join(sorted(missing))}")
    return {i: load_ground_truth((gt_dir / f"{i}.json").read_bytes())
            for i in image_ids}


def run_eval(cfg: PipelineConfig,
             thresholds: OverlayThresholds = OverlayThresholds()) -> EvalReport:
    """Score persisted records against ground truth and emit the report
    JSON, the plain-text mean table, and per-image overlays."""
    records_dir = cfg.paths.out_dir / "records"
    records = load_records(records_dir) if records_dir.is_dir() else []
    if not records:
        log.warning("no annotation records under %s", records_dir)
        report = EvalReport(rows=())
    else:
        if cfg.paths.gt_dir is None:
            raise ConfigError("eval requires paths.gt_dir")
        gts = load_ground_truths(cfg.paths.gt_dir,
                                 sorted({r.image_id for r in records}))
        report = evaluate_dataset(records, gts)
        overlay_dir = cfg.paths.out_dir / "overlays"
        overlay_dir.mkdir(parents=True, exist_ok=True)
        for record in records:
            image = load_png(cfg.paths.image_dir / f"{record.image_id}.png")
            overlay = overlay_render(image, gts[record.image_id].regions,
                                     record.predicted, thresholds)
            save_png(overlay, overlay_dir / f"{record.image_id}.png")
    _write_json(cfg.paths.out_dir / "report.json", report.to_json_dict())
    (cfg.paths.out_dir / "report.txt").write_text(
        format_report_table(report), "utf-8")
    return report


def run_som_render(cfg: PipelineConfig) -> AnnotateOutcome:
    """Render-only pass: candidate sidecars plus SoM PNGs, no gateway."""
    if cfg.strategy == Strategy.DP:
        raise ConfigError("render-only runs need an SoM strategy (NC, IC, Comb)")
    cfg.validate_paths()
    cfg.paths.out_dir.mkdir(parents=True, exist_ok=True)
    failures: dict[str, str] = {}
    for image_id, path in discover_images(cfg.paths.image_dir):
        try:
            image = load_png(path)
            candidates = prepare_candidates(cfg, image_id, image)
            bundle = (render_bundle(image, candidates, cfg.strategy, cfg.layout)
                      if candidates else None)
            persist_som_artifacts(cfg, image_id, image, candidates, bundle)
        except Exception as exc:
            log.error("image %s failed: %s", image_id, exc)
            failures[image_id] = f"{type(exc).__name__}: {exc}"
    return AnnotateOutcome(records=[], failures=failures)


def list_candidates(cfg: PipelineConfig) -> list[tuple[str, list[Candidate]]]:
    """Dry-run filter pass: per image, the surviving candidates."""
    cfg.validate_paths()
    if cfg.paths.mask_dir is None:
        raise ConfigError("filter listing requires paths.mask_dir")
    listing = []
    for image_id, path in discover_images(cfg.paths.image_dir):
        image = load_png(path)
        listing.append((image_id, prepare_candidates(cfg, image_id, image)))
    return listing
