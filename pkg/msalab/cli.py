from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Optional

import click

from msalab.config import PROBES, load_config, validate_config
from msalab.errors import ConfigError
from msalab.runner import EXIT_CONFIG, run, summary_lines
from msalab.settings import load_settings

logger = logging.getLogger(__name__)


def _configure_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=(level or load_settings().log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s - %(message)s",
        stream=sys.stderr,
    )


def _scales(value: Optional[str]) -> Optional[tuple[int, ...]]:
    if not value:
        return None
    try:
        return tuple(int(part) for part in value.split(",") if part.strip())
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from exc


@click.group()
@click.option("--log-level", default=None, help="Overrides MSALAB_LOG_LEVEL.")
@click.pass_context
def main(ctx: click.Context, log_level: Optional[str]) -> None:
    """Numerical laboratory for multi-particle multiscale analysis."""
    # settings are read per invocation
    load_settings.cache_clear()
    ctx.call_on_close(load_settings.cache_clear)
    _configure_logging(log_level)


@main.command()
@click.argument("config_path", type=click.Path(dir_okay=False, path_type=Path))
def validate(config_path: Path) -> None:
    """Check a run configuration and report whether it satisfies strict or desk mode."""
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"invalid: {exc.diagnostic()}", err=True)
        sys.exit(EXIT_CONFIG)
    report = validate_config(config)
    for line in report.lines():
        click.echo(line)
    if config.msa.strict and report.violations:
        sys.exit(EXIT_CONFIG)


@main.command("run")
@click.argument("config_path", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--probe", type=click.Choice(PROBES), default=None, help="Probe to run (overrides the config).")
@click.option("--trials", type=int, default=None, help="Trials per scale.")
@click.option("--seed", type=int, default=None, help="Master seed.")
@click.option("--scales", default=None, help="Comma-separated scales (recursion: one scale count).")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None, help="Run directory.")
@click.option("--workers", type=int, default=None, help="Worker processes (0: available parallelism).")
@click.option("--paper-strict/--desk", "strict", default=None, help="Enforce the strict parameter constraints.")
def run_command(
        config_path: Path,
        probe: Optional[str],
        trials: Optional[int],
        seed: Optional[int],
        scales: Optional[str],
        out: Optional[Path],
        workers: Optional[int],
        strict: Optional[bool],
) -> None:
    """Run one probe and write its artifacts to the run directory."""
    try:
        config = load_config(config_path).with_overrides(
            probe=probe,
            trials=trials,
            seed=seed,
            scales=_scales(scales),
            out=str(out) if out is not None else None,
            workers=workers,
            strict=strict,
        )
    except ConfigError as exc:
        click.echo(f"invalid: {exc.diagnostic()}", err=True)
        sys.exit(EXIT_CONFIG)

    outcome = run(config)
    if outcome.result is not None:
        for line in summary_lines(outcome.result.reports):
            click.echo(line)
    for message in outcome.messages:
        click.echo(f"error: {message}", err=True)
    click.echo(f"outputs: {outcome.out_dir}")
    sys.exit(outcome.exit_code)
