"""Command-line orchestrator.

Subcommands cover the full pipeline (annotate, eval), render-only and
filter-only dry runs (som, filter), and the local mock endpoint
(mock-server). Exit codes: 0 success, 1 partial per-image failures,
2 configuration or IO error.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, load_config
from .evaluation import MissingGroundTruth, format_report_table, ordering_check
from .masks import SchemaError
from .mock_server import (
    FixedPolicy,
    NonePolicy,
    OraclePolicy,
    ReplyPolicy,
    ScriptPolicy,
    run_mock_server,
)
from .pipeline import list_candidates, run_annotate, run_eval, run_som_render

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

log = logging.getLogger(__name__)


def _fail(message: object) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_CONFIG)


@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              default=None, help="TOML or JSON pipeline config file.")
@click.option("--strategy", default=None,
              help="Override the configured strategy (DP, NC, IC, Comb).")
@click.option("--feature", default=None,
              help="Override the configured feature (stop_line, raised_table).")
@click.option("--mode", type=click.Choice(["live", "record", "replay"]),
              default=None, help="Override the gateway mode.")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Override the output directory.")
@click.option("--endpoint", default=None, help="Override the model endpoint URL.")
@click.option("--model", default=None, help="Override the model name.")
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logging.")
@click.pass_context
def main(ctx: click.Context, config_path: Path | None, strategy: str | None,
         feature: str | None, mode: str | None, out: Path | None,
         endpoint: str | None, model: str | None, verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {
        "config_path": config_path,
        "overrides": {"strategy": strategy, "feature": feature, "mode": mode,
                      "out": out, "endpoint": endpoint, "model": model},
    }


def _load_config(ctx: click.Context):
    config_path = ctx.obj["config_path"]
    if config_path is None:
        _fail("--config is required for this command")
    try:
        return load_config(config_path, ctx.obj["overrides"])
    except ConfigError as exc:
        _fail(exc)


@main.command()
@click.pass_context
def annotate(ctx: click.Context) -> None:
    """Run the annotation pipeline over the configured image directory."""
    cfg = _load_config(ctx)
    try:
        outcome = run_annotate(cfg)
    except (ConfigError, OSError) as exc:
        _fail(exc)
    for record in outcome.records:
        boxes = len(record.predicted.members)
        suffix = f" ({record.note})" if record.note else ""
        click.echo(f"{record.image_id}: {boxes} box(es){suffix}")
    for image_id, message in sorted(outcome.failures.items()):
        click.echo(f"{image_id}: FAILED: {message}", err=True)
    sys.exit(EXIT_OK if outcome.ok else EXIT_PARTIAL)


@main.command("eval")
@click.pass_context
def eval_cmd(ctx: click.Context) -> None:
    """Score persisted records against ground truth and emit the report."""
    cfg = _load_config(ctx)
    try:
        report = run_eval(cfg)
    except (ConfigError, MissingGroundTruth, SchemaError, OSError) as exc:
        _fail(exc)
    click.echo(format_report_table(report), nl=False)
    try:
        for feature, verdict in sorted(ordering_check(report).items(),
                                       key=lambda kv: kv[0].value):
            margins = ", ".join(str(m) for m in verdict.margins)
            click.echo(f"ordering {feature.value}: "
                       f"{'ok' if verdict.ok else 'VIOLATED'} (margins {margins})")
    except Exception:
        pass  # ordering is informational; partial reports are fine here
    sys.exit(EXIT_OK)


@main.command()
@click.pass_context
def som(ctx: click.Context) -> None:
    """Render SoM images and sidecars only; no model requests."""
    cfg = _load_config(ctx)
    try:
        outcome = run_som_render(cfg)
    except (ConfigError, OSError) as exc:
        _fail(exc)
    for image_id, message in sorted(outcome.failures.items()):
        click.echo(f"{image_id}: FAILED: {message}", err=True)
    sys.exit(EXIT_OK if outcome.ok else EXIT_PARTIAL)


@main.command("filter")
@click.pass_context
def filter_cmd(ctx: click.Context) -> None:
    """Dry run: list the candidates surviving the filter stage."""
    cfg = _load_config(ctx)
    try:
        listing = list_candidates(cfg)
    except (ConfigError, SchemaError, OSError, ValueError) as exc:
        _fail(exc)
    for image_id, candidates in listing:
        if not candidates:
            click.echo(f"{image_id}: no candidates")
            continue
        for c in candidates:
            click.echo(
                f"{image_id}: mark={c.mark} segment={c.segment_id} "
                f"bbox={tuple(c.bbox.as_list())} area={c.region.area} "
                f"color={c.color.value}")
    sys.exit(EXIT_OK)


@main.command("mock-server")
@click.option("--policy", "policy_name", required=True,
              type=click.Choice(["oracle", "fixed", "none", "script"]))
@click.option("--gt-dir", type=click.Path(path_type=Path),
              help="Ground-truth dir (oracle policy).")
@click.option("--candidates-dir", type=click.Path(path_type=Path),
              help="Candidate sidecar dir (oracle policy).")
@click.option("--mark", type=int, default=1, show_default=True,
              help="Mark to select (fixed policy).")
@click.option("--script", "script_path", type=click.Path(path_type=Path),
              help="Reply lines file (script policy).")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=0,
              help="Port to bind; 0 picks a free one.")
def mock_server_cmd(policy_name: str, gt_dir: Path | None,
                    candidates_dir: Path | None, mark: int,
                    script_path: Path | None, host: str, port: int) -> None:
    """Serve the model wire protocol locally with a canned reply policy."""
    policy: ReplyPolicy
    if policy_name == "oracle":
        if gt_dir is None or candidates_dir is None:
            _fail("oracle policy requires --gt-dir and --candidates-dir")
        policy = OraclePolicy(gt_dir=gt_dir, candidates_dir=candidates_dir)
    elif policy_name == "fixed":
        policy = FixedPolicy(mark=mark)
    elif policy_name == "none":
        policy = NonePolicy()
    else:
        if script_path is None:
            _fail("script policy requires --script")
        policy = ScriptPolicy.from_file(script_path)
    try:
        handle = run_mock_server(policy, host=host, port=port)
    except OSError as exc:
        _fail(exc)
    click.echo(handle.url)
    try:
        handle.thread.join()
    except KeyboardInterrupt:
        handle.close()


if __name__ == "__main__":
    main()
