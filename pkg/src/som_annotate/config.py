"""Pipeline configuration: file loading (TOML or JSON), command-line
overrides, and validation.

Relative paths in a config file resolve against the file's directory, so
a fixture tree can carry its config with it.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import FeatureKind, SomAnnotateError, Strategy
from .filtering import (
    DEFAULT_EXCLUDED_COLORS,
    DEFAULT_MIN_AREA,
    ColorClass,
    FilterConfig,
    HsvThresholds,
)
from .gateway import DEFAULT_TEMPLATES, PromptTemplate
from .som import LayoutConfig

GATEWAY_MODES = ("live", "record", "replay")


class ConfigError(SomAnnotateError):
    """The configuration is unreadable, malformed, or inconsistent."""


@dataclass(frozen=True)
class GatewayConfig:
    """Where and how model requests go."""

    endpoint: str
    model_name: str = "gpt-4o"
    mode: str = "live"
    rate_limit_per_minute: float | None = None
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in GATEWAY_MODES:
            raise ConfigError(
                f"gateway mode must be one of {GATEWAY_MODES}, got {self.mode!r}")
        if not self.endpoint:
            raise ConfigError("gateway endpoint must be set")


@dataclass(frozen=True)
class PathsConfig:
    """Input and output locations for one run."""

    image_dir: Path
    out_dir: Path
    mask_dir: Path | None = None
    gt_dir: Path | None = None
    transcript_dir: Path | None = None


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one annotate/eval run needs.

    DP runs ignore the filter and layout sections entirely. multi_mark
    keeps every mark the model lists; when false only the first is kept.
    """

    feature: FeatureKind
    strategy: Strategy
    gateway: GatewayConfig
    paths: PathsConfig
    filter: FilterConfig = FilterConfig()
    layout: LayoutConfig = LayoutConfig()
    templates: Mapping[FeatureKind, PromptTemplate] = field(
        default_factory=lambda: DEFAULT_TEMPLATES)
    workers: int = 4
    multi_mark: bool = True

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.gateway.mode in ("record", "replay") and self.paths.transcript_dir is None:
            raise ConfigError(
                f"gateway mode {self.gateway.mode!r} requires paths.transcript_dir")

    def validate_paths(self) -> None:
        """Run-start check: every referenced input location exists."""
        if not self.paths.image_dir.is_dir():
            raise ConfigError(f"image_dir does not exist: {self.paths.image_dir}")
        if self.strategy != Strategy.DP:
            if self.paths.mask_dir is None:
                raise ConfigError(
                    f"strategy {self.strategy.value} requires paths.mask_dir")
            if not self.paths.mask_dir.is_dir():
                raise ConfigError(f"mask_dir does not exist: {self.paths.mask_dir}")
        if self.gateway.mode == "replay":
            assert self.paths.transcript_dir is not None
            if not self.paths.transcript_dir.is_dir():
                raise ConfigError(
                    f"transcript_dir does not exist: {self.paths.transcript_dir}")


def _check_keys(section: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(sorted(unknown))}")


def _parse_feature(value: Any) -> FeatureKind:
    try:
        return FeatureKind(str(value))
    except ValueError:
        raise ConfigError(
            f"feature must be one of {[f.value for f in FeatureKind]}, "
            f"got {value!r}") from None


def _parse_strategy(value: Any) -> Strategy:
    text = str(value)
    for strategy in Strategy:
        if text.lower() == strategy.value.lower():
            return strategy
    raise ConfigError(
        f"strategy must be one of {[s.value for s in Strategy]}, got {value!r}")


def _parse_color(value: Any) -> ColorClass:
    try:
        return ColorClass(str(value).lower())
    except ValueError:
        raise ConfigError(
            f"color must be one of {[c.value for c in ColorClass]}, "
            f"got {value!r}") from None


def _parse_filter(section: Mapping[str, Any]) -> FilterConfig:
    _check_keys(section, {"min_area", "excluded_colors", "hsv"}, "filter")
    min_area = dict(DEFAULT_MIN_AREA)
    for name, value in section.get("min_area", {}).items():
        min_area[_parse_feature(name)] = int(value)
    excluded = DEFAULT_EXCLUDED_COLORS
    if "excluded_colors" in section:
        excluded = frozenset(_parse_color(c) for c in section["excluded_colors"])
    hsv = HsvThresholds()
    hsv_section = section.get("hsv", {})
    _check_keys(hsv_section, {f.name for f in
                              HsvThresholds.__dataclass_fields__.values()}, "filter.hsv")
    if hsv_section:
        hsv = replace(hsv, **{k: float(v) for k, v in hsv_section.items()})
    try:
        return FilterConfig(min_area_by_feature=min_area,
                            excluded_colors=excluded, hsv=hsv)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_layout(section: Mapping[str, Any]) -> LayoutConfig:
    allowed = {"padding", "glyph_scale", "grid_columns", "stroke_width", "max_canvas"}
    _check_keys(section, allowed, "layout")
    kwargs: dict[str, Any] = {k: int(v) for k, v in section.items()}
    if kwargs.get("grid_columns") == 0:
        kwargs["grid_columns"] = None
    try:
        return LayoutConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_gateway(section: Mapping[str, Any]) -> GatewayConfig:
    allowed = {"endpoint", "model", "mode", "rate_limit_per_minute",
               "timeout_s", "max_retries", "backoff_base_s"}
    _check_keys(section, allowed, "gateway")
    rate = section.get("rate_limit_per_minute")
    return GatewayConfig(
        endpoint=str(section.get("endpoint", "")),
        model_name=str(section.get("model", "gpt-4o")),
        mode=str(section.get("mode", "live")),
        rate_limit_per_minute=float(rate) if rate else None,
        timeout_s=float(section.get("timeout_s", 60.0)),
        max_retries=int(section.get("max_retries", 3)),
        backoff_base_s=float(section.get("backoff_base_s", 0.5)),
    )


def _parse_paths(section: Mapping[str, Any], base: Path) -> PathsConfig:
    allowed = {"image_dir", "out_dir", "mask_dir", "gt_dir", "transcript_dir"}
    _check_keys(section, allowed, "paths")
    for key in ("image_dir", "out_dir"):
        if key not in section:
            raise ConfigError(f"paths.{key} is required")

    def resolve(key: str) -> Path | None:
        if key not in section:
            return None
        return (base / str(section[key])).resolve()

    return PathsConfig(
        image_dir=resolve("image_dir"),  # type: ignore[arg-type]
        out_dir=resolve("out_dir"),  # type: ignore[arg-type]
        mask_dir=resolve("mask_dir"),
        gt_dir=resolve("gt_dir"),
        transcript_dir=resolve("transcript_dir"),
    )


def _parse_templates(section: Mapping[str, Any]) -> dict[FeatureKind, PromptTemplate]:
    templates = dict(DEFAULT_TEMPLATES)
    for name, sub in section.items():
        feature = _parse_feature(name)
        _check_keys(sub, {"feature_description", "instruction",
                          "direct_instruction"}, f"templates.{name}")
        base = templates.get(feature)
        templates[feature] = PromptTemplate(
            feature_description=str(sub.get(
                "feature_description",
                base.feature_description if base else "")),
            instruction=str(sub.get(
                "instruction", base.instruction if base else "")),
            direct_instruction=(str(sub["direct_instruction"])
                                if "direct_instruction" in sub
                                else (base.direct_instruction if base else None)),
        )
    return templates


def parse_config_data(obj: Mapping[str, Any], base: Path) -> PipelineConfig:
    top_allowed = {"feature", "strategy", "workers", "multi_mark",
                   "gateway", "paths", "filter", "layout", "templates"}
    _check_keys(obj, top_allowed, "top-level")
    for key in ("feature", "strategy", "paths"):
        if key not in obj:
            raise ConfigError(f"config key {key!r} is required")
    return PipelineConfig(
        feature=_parse_feature(obj["feature"]),
        strategy=_parse_strategy(obj["strategy"]),
        gateway=_parse_gateway(obj.get("gateway", {"endpoint": ""})),
        paths=_parse_paths(obj["paths"], base),
        filter=_parse_filter(obj.get("filter", {})),
        layout=_parse_layout(obj.get("layout", {})),
        templates=_parse_templates(obj.get("templates", {})),
        workers=int(obj.get("workers", 4)),
        multi_mark=bool(obj.get("multi_mark", True)),
    )


def load_config(path: Path | str,
                overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Load a TOML (default) or JSON (.json) config file and apply
    command-line overrides on top."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            obj = json.loads(data.decode("utf-8"))
        else:
            obj = tomllib.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config root must be a table/object, got {type(obj).__name__}")
    cfg = parse_config_data(obj, path.parent)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: PipelineConfig,
                    overrides: Mapping[str, Any]) -> PipelineConfig:
    """Overlay non-None command-line values onto a loaded config.

    Recognized keys: strategy, feature, mode, out, endpoint, model.
    """
    known = {"strategy", "feature", "mode", "out", "endpoint", "model"}
    unknown = {k for k, v in overrides.items() if v is not None} - known
    if unknown:
        raise ConfigError(f"unknown override(s): {', '.join(sorted(unknown))}")
    gateway = cfg.gateway
    if overrides.get("mode") is not None:
        gateway = replace(gateway, mode=str(overrides["mode"]))
    if overrides.get("endpoint") is not None:
        gateway = replace(gateway, endpoint=str(overrides["endpoint"]))
    if overrides.get("model") is not None:
        gateway = replace(gateway, model_name=str(overrides["model"]))
    paths = cfg.paths
    if overrides.get("out") is not None:
        paths = replace(paths, out_dir=Path(overrides["out"]).resolve())
    return replace(
        cfg,
        feature=(_parse_feature(overrides["feature"])
                 if overrides.get("feature") is not None else cfg.feature),
        strategy=(_parse_strategy(overrides["strategy"])
                  if overrides.get("strategy") is not None else cfg.strategy),
        gateway=gateway,
        paths=paths,
    )
