"""Safe reinforcement-learning load control on an HCCI engine surrogate.

Modules are imported explicitly by consumers; this ``__init__`` stays cheap:

* :mod:`engine_lab.core`: state/action types, action-space geometry, classifier.
* :mod:`engine_lab.nn` / :mod:`engine_lab.ddpg`: numpy MLP and the DDPG agent.
* :mod:`engine_lab.reward`: clamped-tanh multi-objective reward.
* :mod:`engine_lab.safety` / :mod:`engine_lab.measurement`: k-NN safety
  monitor and the limit-learning measurement loop.
* :mod:`engine_lab.engine_sim`: stochastic HCCI surrogate and IMEP utilities.
* :mod:`engine_lab.udp_link`: split environment/agent execution over UDP.
* :mod:`engine_lab.orchestrator`: episode loop, checkpoints and exports.
* :mod:`engine_lab.cli`: Click subcommand group (``engine-lab``).
"""

from __future__ import annotations

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("engine-lab")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = ["__version__"]
