"""CLI: ``train``, ``adapt`` and ``validate``."""

from __future__ import annotations

import logging
from pathlib import Path

import click

from ..orchestrator import RunResult, run_adaptation, run_training, run_validation
from ._options import config_options, guarded, lab_config, udp_client, udp_options

logger = logging.getLogger(__name__)

_OUT = click.option(
    "--out",
    "out_dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("runs/latest"),
    show_default=True,
    help="Run directory (cycles.csv, episodes.csv, summary.json, checkpoint)",
)
_MATRICES = click.option(
    "--matrices",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Limitation matrices [default: <out>/mats.csv]",
)


def _report(result: RunResult) -> None:
    summary = result.summary or {}
    val = summary.get("validation", {})
    if val:
        click.echo(
            f"validation: rmse_pmi={val['rmse_pmi']:.4f} bar  dp_violations={int(val['dp_violations'])}  "
            f"ethanol_rmse={val['ethanol_rmse']:.4f}"
        )
    click.echo(f"✓ {len(result.episodes)} episodes → {result.out_dir}")


@click.command("train")
@config_options
@udp_options
@_OUT
@_MATRICES
@click.option("--episodes", type=int, default=None, help="Training episodes [default: plan.train_episodes]")
@click.option("--resume", is_flag=True, help="Continue the run stored in --out")
@click.option(
    "--prefill",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Measurement cycle log loaded into the replay buffer first",
)
@click.option("--offline-batches", type=int, default=None, help="Update steps on the pre-filled buffer")
def train(
    config_path: Path | None,
    seed: int | None,
    deterministic: bool,
    no_progress: bool,
    udp: bool,
    udp_listen: str | None,
    udp_peer: str | None,
    deadline_ms: float | None,
    out_dir: Path,
    matrices: Path | None,
    episodes: int | None,
    resume: bool,
    prefill: Path | None,
    offline_batches: int | None,
) -> None:
    """Train a DDPG agent under the safety monitor."""

    def _run() -> None:
        cfg = lab_config(config_path, seed, deterministic)
        client = udp_client(cfg, udp, udp_listen, udp_peer, deadline_ms)
        try:
            result = run_training(
                cfg,
                out_dir,
                episodes,
                matrices=matrices,
                resume=resume,
                prefill=prefill,
                offline_batches=offline_batches,
                policy=client,
                quantize=client is not None,
                progress=not no_progress,
            )
        finally:
            if client is not None:
                logger.info("UDP link statistics", extra=client.endpoint.latency_summary())
                client.endpoint.close()
        _report(result)

    guarded(_run)


@click.command("adapt")
@config_options
@udp_options
@_OUT
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Trained agent to adapt (required unless --resume or --udp)",
)
@click.option("--episodes", type=int, default=None, help="Adaptation episodes [default: plan.adapt_episodes]")
@click.option("--resume", is_flag=True, help="Continue the run stored in --out")
def adapt(
    config_path: Path | None,
    seed: int | None,
    deterministic: bool,
    no_progress: bool,
    udp: bool,
    udp_listen: str | None,
    udp_peer: str | None,
    deadline_ms: float | None,
    out_dir: Path,
    checkpoint: Path | None,
    episodes: int | None,
    resume: bool,
) -> None:
    """Re-train a converged agent with reduced noise, no monitor and the ethanol objective."""

    def _run() -> None:
        cfg = lab_config(config_path, seed, deterministic)
        client = udp_client(cfg, udp, udp_listen, udp_peer, deadline_ms)
        try:
            result = run_adaptation(
                cfg,
                checkpoint,
                out_dir,
                episodes,
                resume=resume,
                policy=client,
                quantize=client is not None,
                progress=not no_progress,
            )
        finally:
            if client is not None:
                client.endpoint.close()
        _report(result)

    guarded(_run)


@click.command("validate")
@config_options
@_OUT
@_MATRICES
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False, path_type=Path),
    required=True,
    help="Agent checkpoint to evaluate",
)
@click.option("--no-monitor", is_flag=True, help="Validate without the safety monitor")
def validate(
    config_path: Path | None,
    seed: int | None,
    deterministic: bool,
    no_progress: bool,
    out_dir: Path,
    matrices: Path | None,
    checkpoint: Path,
    no_monitor: bool,
) -> None:
    """Run one noise-free validation episode on the fixed load-step profile."""

    def _run() -> None:
        cfg = lab_config(config_path, seed, deterministic)
        result = run_validation(
            cfg,
            checkpoint,
            out_dir,
            matrices=matrices,
            monitor_enabled=not no_monitor,
            progress=not no_progress,
        )
        _report(result)

    guarded(_run)
