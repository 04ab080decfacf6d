"""Options shared by several subcommands and the error-to-exit-code guard."""

from __future__ import annotations

import json
import logging
from collections.abc import Callable
from pathlib import Path
from typing import Any, TypeVar

import click

from ..config import LabConfig, load_config
from ..error_service import EngineLabError, error_from_exception
from ..udp_link import EnvEndpoint, UdpAgentClient, parse_endpoint

logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Any])
T = TypeVar("T")


def config_options(f: F) -> F:
    """``--config``, ``--seed``, ``--deterministic`` and ``--no-progress``."""
    for decorator in reversed(
        (
            click.option(
                "--config",
                "config_path",
                type=click.Path(dir_okay=False, path_type=Path),
                default=None,
                help="JSON config merged over the defaults",
            ),
            click.option("--seed", type=int, default=None, help="Override the master seed"),
            click.option(
                "--deterministic",
                is_flag=True,
                help="Zero all simulator noise",
            ),
            click.option("--no-progress", is_flag=True, help="Hide progress bars"),
        )
    ):
        f = decorator(f)
    return f


def udp_options(f: F) -> F:
    """``--udp``, ``--udp-listen``, ``--udp-peer`` and ``--deadline-ms``."""
    for decorator in reversed(
        (
            click.option("--udp", is_flag=True, help="Run the agent behind the UDP link (see serve-agent)"),
            click.option("--udp-listen", default=None, help="host:port of the environment side"),
            click.option("--udp-peer", default=None, help="host:port of the agent side"),
            click.option("--deadline-ms", type=float, default=None, help="Per-cycle reply deadline"),
        )
    ):
        f = decorator(f)
    return f


def lab_config(config_path: Path | None, seed: int | None, deterministic: bool) -> LabConfig:
    return load_config(config_path).with_overrides(seed=seed, deterministic=deterministic)


def udp_client(
    cfg: LabConfig, udp: bool, listen: str | None, peer: str | None, deadline_ms: float | None
) -> UdpAgentClient | None:
    """Environment-side policy adapter, or ``None`` for in-process execution."""
    if not (udp or cfg.udp.enabled):
        return None
    endpoint = EnvEndpoint(
        parse_endpoint(listen or cfg.udp.listen),
        parse_endpoint(peer or cfg.udp.peer),
        deadline_ms if deadline_ms is not None else cfg.udp.deadline_ms,
    )
    return UdpAgentClient(endpoint)


def guarded(fn: Callable[[], T]) -> T:
    """Run *fn*; map library errors to their exit codes with a JSON error payload on stderr."""
    try:
        return fn()
    except EngineLabError as exc:
        payload = error_from_exception(exc)
        logger.error("Command failed", extra={"code": payload["code"], "error": payload["message"]})
        click.echo(json.dumps(payload), err=True)
        raise click.exceptions.Exit(exc.exit_code) from exc
