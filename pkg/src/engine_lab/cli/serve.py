"""CLI: agent side of the UDP split."""

from __future__ import annotations

import logging
from pathlib import Path

import click

from ..config import AGENT_SECTIONS, config_hash
from ..ddpg import TrainingReport, save_checkpoint
from ..orchestrator import agent_session, prepare_agent
from ..udp_link import AgentEndpoint, parse_endpoint
from ._options import config_options, guarded, lab_config

logger = logging.getLogger(__name__)


@click.command("serve-agent")
@config_options
@click.option("--listen", "listen", default=None, help="host:port to serve on [default: udp.peer]")
@click.option(
    "--mode",
    type=click.Choice(["train", "adapt", "validate"]),
    default="train",
    show_default=True,
)
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Start from a stored agent (required for adapt and validate)",
)
@click.option(
    "--out",
    "out_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=Path("runs/agent/checkpoint.npz"),
    show_default=True,
    help="Checkpoint written after every training step",
)
def serve_agent(
    config_path: Path | None,
    seed: int | None,
    deterministic: bool,
    no_progress: bool,
    listen: str | None,
    mode: str,
    checkpoint: Path | None,
    out_path: Path,
) -> None:
    """Answer state datagrams with actions until interrupted."""

    def _run() -> None:
        cfg = lab_config(config_path, seed, deterministic)
        agent = prepare_agent(cfg, mode, checkpoint)  # type: ignore[arg-type]
        session = agent_session(cfg, agent, training=mode != "validate", quantize=True)
        meta = {"mode": mode, "seed": cfg.seed, "config_hash": config_hash(cfg, AGENT_SECTIONS)}

        def _on_report(report: TrainingReport) -> None:
            logger.info(
                "Episode trained",
                extra={"critic_loss": report.critic_loss, "mean_q": report.mean_q, "sigma": report.sigma},
            )
            save_checkpoint(out_path, agent, meta)

        address = parse_endpoint(listen or cfg.udp.peer)
        with AgentEndpoint(session, address, on_report=_on_report) as endpoint:
            click.echo(f"agent listening on {address[0]}:{address[1]} ({mode})")
            try:
                endpoint.serve()
            except KeyboardInterrupt:
                logger.info(
                    "Agent endpoint stopped",
                    extra={
                        "served": endpoint.served,
                        "duplicates": endpoint.duplicates,
                        "malformed": endpoint.malformed,
                        "version_mismatch": endpoint.version_mismatch,
                    },
                )
        if mode != "validate":
            save_checkpoint(out_path, agent, meta)

    guarded(_run)
