#!/usr/bin/env python3
"""
pnm-diag - Main Entry Point

Fault diagnosis over PNM cable telemetry: separates maintenance issues
(shared plant faults) from service issues (single-premise faults).
Keeps the entry point minimal and delegates to the orchestrator.
"""

import sys
from datetime import timezone
from pathlib import Path
from typing import Optional

import click
from dateutil import parser as date_parser
from dotenv import load_dotenv
from loguru import logger

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent / "src"))

from core.config import get_config  # noqa: E402
from core.logger import setup_logging  # noqa: E402
from core.orchestrator import PipelineOrchestrator, RunResult  # noqa: E402
from pnm.errors import PNMError  # noqa: E402


def parse_split_ts(value: Optional[str]) -> Optional[float]:
    """Unix seconds, or any date dateutil understands (naive dates are UTC)."""
    if value is None:
        return None
    try:
        return float(value)
    except ValueError:
        pass
    try:
        parsed = date_parser.isoparse(value) if "T" in value else date_parser.parse(value)
    except (ValueError, OverflowError) as e:
        raise click.BadParameter(f"cannot parse split timestamp {value!r}: {e}")
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed.timestamp()


def _orchestrator(ctx: click.Context) -> PipelineOrchestrator:
    options = ctx.obj
    config_path = Path(options["config"])
    config = get_config(
        config_path,
        seed=options["seed"],
        jobs=options["jobs"],
        split_ts=parse_split_ts(options["split_ts"]),
        mesh_step=options["mesh_step"],
    )
    setup_logging("DEBUG" if options["debug"] else config.log_level, config.log_file)
    return PipelineOrchestrator(config, config_path)


def _finish(result: RunResult, lines) -> None:
    if not result.success:
        logger.error(f"❌ {result.command} failed: {result.error_message}")
        sys.exit(result.exit_code)
    for line in lines:
        click.echo(line)
    logger.info(f"⏱️  Total time: {result.execution_time}")


def _run(ctx: click.Context, command: str, format_result, **kwargs) -> None:
    try:
        orchestrator = _orchestrator(ctx)
    except PNMError as e:
        logger.error(f"❌ Configuration error: {e}")
        sys.exit(e.exit_code)
    result = getattr(orchestrator, command)(**kwargs)
    _finish(result, format_result(result) if result.success else [])


@click.group()
@click.option("--config", "config", required=True, type=click.Path(dir_okay=False), help="JSON config file")
@click.option("--seed", type=int, default=None, help="Override the config seed")
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="Worker processes across fNodes")
@click.option("--split-ts", "split_ts", default=None, help="Train/test boundary (Unix seconds or a date)")
@click.option("--mesh-step", "mesh_step", type=float, default=None, help="s_f grid step for train")
@click.option("--debug", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx: click.Context, config: str, seed, jobs, split_ts, mesh_step, debug: bool):
    """
    pnm-diag - maintenance vs service fault diagnosis on PNM telemetry

    Examples:
        pnm-diag --config run.json synth
        pnm-diag --config run.json --split-ts 2024-03-01 train
        pnm-diag --config run.json batch
        pnm-diag --config run.json reactive --ticket-id f000-t00012
        pnm-diag --config run.json eval
    """
    load_dotenv()
    setup_logging("DEBUG" if debug else "INFO")
    ctx.ensure_object(dict)
    ctx.obj.update(config=config, seed=seed, jobs=jobs, split_ts=split_ts, mesh_step=mesh_step, debug=debug)


@cli.command()
@click.pass_context
def synth(ctx: click.Context):
    """Generate synthetic telemetry, tickets and ground truth."""
    _run(
        ctx,
        "synth",
        lambda r: [f"devices: {r.payload['devices']}", f"tickets: {r.payload['tickets']}", *r.outputs],
    )


@cli.command()
@click.pass_context
def calibrate(ctx: click.Context):
    """Calibrate epoch detection and the missing-data threshold."""
    _run(ctx, "calibrate", lambda r: [f"missing_threshold_hours: {r.payload['missing_threshold_hours']}"])


@cli.command()
@click.pass_context
def train(ctx: click.Context):
    """Calibrate, tune detection thresholds and s_f per feature."""

    def lines(result: RunResult):
        thresholds = result.payload["similarity_thresholds"]
        return [f"{feature}: s_f={thresholds[feature]} trr_m={trr}" for feature, trr in result.payload["trr_m"].items()]

    _run(ctx, "train", lines)


@cli.command()
@click.pass_context
def batch(ctx: click.Context):
    """Diagnose every fNode on a daily schedule and write diagnosis.csv."""
    _run(ctx, "batch", lambda r: [*(f"{k}: {v}" for k, v in r.payload["labels"].items()), *r.outputs])


@cli.command()
@click.option("--ticket-id", "ticket_id", required=True, help="Ticket to diagnose")
@click.pass_context
def reactive(ctx: click.Context, ticket_id: str):
    """Diagnose one ticket's device at the ticket's open time."""
    _run(ctx, "reactive", lambda r: [r.payload["label"]], ticket_id=ticket_id)


@cli.command(name="eval")
@click.pass_context
def evaluate(ctx: click.Context):
    """Write report.json and the CDF tables."""
    _run(ctx, "eval", lambda r: [*(f"{k}: {v}" for k, v in sorted(r.payload.items())), *r.outputs])


def main():
    try:
        cli(obj={})
    except KeyboardInterrupt:
        logger.warning("⚠️  Interrupted by user")
        sys.exit(1)


if __name__ == "__main__":
    main()
