"""CLI: aggregate a cycle log into summary, curve and histogram files."""

from __future__ import annotations

import json
from pathlib import Path

import click

from ..error_service import ContractViolation
from ..metrics import export_metrics, json_safe
from ._options import guarded, lab_config


@click.command("export")
@click.option(
    "--log",
    "log_path",
    type=click.Path(dir_okay=False, path_type=Path),
    required=True,
    help="cycles.csv of a train/adapt/validate run or a measurement log",
)
@click.option(
    "--out",
    "out_dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Output directory [default: directory of --log]",
)
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--plot", is_flag=True, help="Also render PNG figures")
def export(log_path: Path, out_dir: Path | None, config_path: Path | None, plot: bool) -> None:
    """Write summary.json, training_curve.csv and dpmax_hist.csv."""

    def _run() -> None:
        cfg = lab_config(config_path, None, False)
        if not log_path.is_file():
            raise ContractViolation(f"cycle log not found: {log_path}")
        result = export_metrics(
            log_path,
            out_dir or log_path.parent,
            cfg.engine_constants,
            cfg.reward.x_eth_sp,
            plot=plot,
        )
        click.echo(json.dumps(json_safe(result["summary"]["all"]), indent=2, sort_keys=True, allow_nan=False))

    guarded(_run)
