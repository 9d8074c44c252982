"""Zero-shot annotation of urban features in satellite imagery via
Set-of-Mark prompting of a vision-language model.

The pipeline: segment masks in, color/area filtering, deterministic
mark rendering (no-context, in-context, or both), one model round trip,
reply parsing back to pixel boxes, and exact-arithmetic IoU evaluation.
"""

from .core import (
    BBox,
    BothEmpty,
    EmptyRegion,
    FeatureKind,
    GridMismatch,
    PixelRegion,
    RasterImage,
    RegionSet,
    SomAnnotateError,
    Strategy,
    bbox_of_region,
    iou,
    region_area,
    union_pixels,
)
from .masks import (
    GroundTruthDoc,
    MaskDocument,
    RunLengthEncoding,
    Segment,
    decode_rle,
    encode_rle,
    load_ground_truth,
    parse_mask_document,
)
from .filtering import Candidate, ColorClass, FilterConfig, apply_filters, classify_color
from .som import LayoutConfig, MarkedImage, SomBundle, mark_index_sidecar, render_bundle
from .gateway import (
    MarkSelection,
    PromptTemplate,
    Transcript,
    TranscriptStore,
    VlmRequest,
    build_direct_prompt,
    build_prompt,
    parse_direct_boxes,
    parse_mark_selection,
    request_annotation,
    request_digest,
    resolve_selection,
)
from .evaluation import (
    AnnotationRecord,
    EvalReport,
    EvalRow,
    OverlayThresholds,
    evaluate_dataset,
    evaluate_image,
    format_report_table,
    load_report_fixture,
    ordering_check,
    overlay_render,
)
from .config import GatewayConfig, PathsConfig, PipelineConfig, load_config
from .pipeline import run_annotate, run_eval
from .mock_server import run_mock_server
from .raster_io import from_png_bytes, load_png, save_png, to_png_bytes

__version__ = "0.1.0"

__all__ = [
    "AnnotationRecord",
    "BBox",
    "BothEmpty",
    "Candidate",
    "ColorClass",
    "EmptyRegion",
    "EvalReport",
    "EvalRow",
    "FeatureKind",
    "FilterConfig",
    "GatewayConfig",
    "GridMismatch",
    "GroundTruthDoc",
    "LayoutConfig",
    "MarkSelection",
    "MarkedImage",
    "MaskDocument",
    "OverlayThresholds",
    "PathsConfig",
    "PipelineConfig",
    "PixelRegion",
    "PromptTemplate",
    "RasterImage",
    "RegionSet",
    "RunLengthEncoding",
    "Segment",
    "SomAnnotateError",
    "SomBundle",
    "Strategy",
    "Transcript",
    "TranscriptStore",
    "VlmRequest",
    "apply_filters",
    "bbox_of_region",
    "build_direct_prompt",
    "build_prompt",
    "classify_color",
    "decode_rle",
    "encode_rle",
    "evaluate_dataset",
    "evaluate_image",
    "format_report_table",
    "from_png_bytes",
    "iou",
    "load_config",
    "load_ground_truth",
    "load_png",
    "load_report_fixture",
    "mark_index_sidecar",
    "ordering_check",
    "overlay_render",
    "parse_direct_boxes",
    "parse_mark_selection",
    "parse_mask_document",
    "region_area",
    "render_bundle",
    "request_annotation",
    "request_digest",
    "resolve_selection",
    "run_annotate",
    "run_eval",
    "run_mock_server",
    "save_png",
    "to_png_bytes",
    "union_pixels",
]
