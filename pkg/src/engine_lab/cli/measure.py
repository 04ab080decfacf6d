"""CLI: learn limitation matrices on the engine simulator."""

from __future__ import annotations

import logging
from pathlib import Path

import click

from ..orchestrator import run_measurement_mode
from ._options import config_options, guarded, lab_config

logger = logging.getLogger(__name__)


@click.command("measure")
@config_options
@click.option("--cycles", type=int, default=None, help="Measurement budget [default: plan.measure_cycles]")
@click.option(
    "--out",
    "out_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=Path("mats.csv"),
    show_default=True,
    help="Limitation-matrix CSV (a .json sidecar is written next to it)",
)
@click.option(
    "--log",
    "log_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=Path("measure_cycles.csv"),
    show_default=True,
    help="Per-cycle measurement log, usable as --prefill for train",
)
def measure(
    config_path: Path | None,
    seed: int | None,
    deterministic: bool,
    no_progress: bool,
    cycles: int | None,
    out_path: Path,
    log_path: Path,
) -> None:
    """Probe the simulator cell by cell and write R, R_Lim, Z_Lim and O."""

    def _run() -> None:
        cfg = lab_config(config_path, seed, deterministic)
        budget = cfg.plan.measure_cycles if cycles is None else cycles
        if budget < 1:
            raise click.BadParameter("--cycles must be >= 1")
        result = run_measurement_mode(cfg, budget, out_path, log_path, progress=not no_progress)
        click.echo(f"✓ {result.cycles} cycles measured → {out_path}")

    guarded(_run)
