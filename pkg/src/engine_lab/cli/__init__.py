"""``engine_lab.cli`` package: the ``engine-lab`` console script.

Exposes a :class:`click.Group` named :func:`main` that dispatches to six
subcommands:

* ``measure``: learn limitation matrices on the simulator
* ``train``: DDPG training under the safety monitor
* ``adapt``: re-train a converged agent for the ethanol-share objective
* ``validate``: one noise-free validation episode of a checkpoint
* ``export``: summary, training curve and dp_max histogram from a cycle log
* ``serve-agent``: agent side of the UDP split

Library errors end the process with their exit code: 2 for configuration
errors, 3 for missing or mismatching limitation matrices, 1 otherwise.
"""

from __future__ import annotations

import os

import click

from ..error_service import set_correlation_id
from ..logging_config import setup as _log_setup
from .export import export as _export
from .measure import measure as _measure
from .serve import serve_agent as _serve_agent
from .train import adapt as _adapt
from .train import train as _train
from .train import validate as _validate


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(["debug", "info", "warning", "error", "critical"]),
    default="info",
    show_default=True,
    help="Set logging level for all commands",
)
def main(log_level: str) -> None:
    """Safe reinforcement-learning load control for an HCCI engine surrogate."""
    os.environ["ENGINE_LAB_LOG_LEVEL"] = log_level.upper()
    _log_setup()
    set_correlation_id(os.getenv("ENGINE_LAB_CORRELATION_ID"))


main.add_command(_measure, "measure")
main.add_command(_train, "train")
main.add_command(_adapt, "adapt")
main.add_command(_validate, "validate")
main.add_command(_export, "export")
main.add_command(_serve_agent, "serve-agent")

__all__ = ["main"]
