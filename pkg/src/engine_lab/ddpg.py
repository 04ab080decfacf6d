"""DDPG agent: noisy policy, replay buffer, critic/actor/target updates.

The actor maps a normalized :class:`~engine_lab.core.CycleState` to a raw
(pre-tanh) action; the critic scores ``[normalized state, raw action]``.
Training happens only between episodes (:func:`end_of_episode_training`);
:class:`AgentSession` is the per-cycle bookkeeping shared by the in-process
loop and the UDP agent server.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import deque
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .core import CycleState, FloatArray, RawAction, StateRanges, normalize_state
from .error_service import CheckpointError, ConfigError, ContractViolation
from .nn import (
    Gradients,
    Mlp,
    OptimizerMode,
    OptimizerState,
    backward,
    forward,
    forward_cached,
    init_mlp,
    init_optimizer,
    mlp_from_arrays,
    mlp_to_arrays,
    opt_step,
    optimizer_from_arrays,
    optimizer_to_arrays,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BUFFER_VERSION = 1
STATE_DIM = 8
ACTION_DIM = 3


@dataclass(frozen=True)
class AgentHyperParams:
    gamma: float = 0.9
    sigma0: float = 0.5
    sigma_decay: float = 0.95
    batch_size: int = 64
    lr_critic: float = 1e-3
    lr_actor: float = 1e-3
    polyak: float = 1e-3
    buffer_capacity: int = 50_000
    hidden: tuple[int, ...] = (64, 64)
    replay_batches: int = 4
    optimizer: OptimizerMode = "adam"
    actor_final_scale: float = 1e-3

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ConfigError("agent.gamma: must lie in (0, 1]")
        if not 0 < self.polyak <= 1:
            raise ConfigError("agent.polyak: must lie in (0, 1]")
        if self.sigma0 < 0 or not 0 < self.sigma_decay <= 1:
            raise ConfigError("agent.sigma0 >= 0 and agent.sigma_decay in (0, 1] required")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.replay_batches < 0:
            raise ConfigError("agent: batch_size, buffer_capacity >= 1, replay_batches >= 0")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("agent.hidden: need at least one positive layer width")
        if self.optimizer not in ("adam", "plain"):
            raise ConfigError(f"agent.optimizer: unknown mode {self.optimizer!r}")


@dataclass(frozen=True)
class Experience:
    s_prev: CycleState
    u: RawAction
    s_next: CycleState
    reward: float
    done: int

    def __post_init__(self) -> None:
        if self.reward > 0 or not np.isfinite(self.reward):
            raise ContractViolation(f"reward must be finite and <= 0, got {self.reward}")
        if self.done not in (0, 1):
            raise ContractViolation(f"done flag must be 0 or 1, got {self.done}")


@dataclass
class Batch:
    states: FloatArray
    actions: FloatArray
    next_states: FloatArray
    rewards: FloatArray
    dones: FloatArray

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


def make_batch(experiences: Sequence[Experience], ranges: StateRanges) -> Batch:
    if not experiences:
        raise ContractViolation("batch must not be empty")
    return Batch(
        states=normalize_state([e.s_prev.as_array() for e in experiences], ranges),
        actions=np.array([e.u.values for e in experiences], dtype=np.float64),
        next_states=normalize_state([e.s_next.as_array() for e in experiences], ranges),
        rewards=np.array([e.reward for e in experiences], dtype=np.float64),
        dones=np.array([e.done for e in experiences], dtype=np.float64),
    )


def sample_indices(n: int, batch_size: int, rng: np.random.Generator, source: str) -> np.ndarray:
    """Indices of one batch; without replacement unless *n* is too small."""
    if n == 0:
        raise ContractViolation(f"cannot sample from empty {source}")
    replace = batch_size > n
    if replace:
        logger.warning(
            "Sampling with replacement",
            extra={"source": source, "available": n, "batch_size": batch_size},
        )
    return rng.choice(n, size=batch_size, replace=replace)


class ReplayBuffer:
    """Bounded FIFO of experiences with a seeded sampler."""

    def __init__(self, capacity: int, rng: np.random.Generator) -> None:
        self.capacity = capacity
        self.rng = rng
        self._items: deque[Experience] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Experience]:
        return iter(self._items)

    def push(self, exp: Experience) -> None:
        self._items.append(exp)

    def extend(self, exps: Iterable[Experience]) -> None:
        self._items.extend(exps)

    def items(self) -> list[Experience]:
        return list(self._items)

    def sample(self, batch_size: int) -> tuple[list[Experience], np.ndarray]:
        idx = sample_indices(len(self._items), batch_size, self.rng, "replay buffer")
        return [self._items[i] for i in idx], idx

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self._items:
            h.update(e.s_prev.as_array().tobytes())
            h.update(e.u.as_array().tobytes())
            h.update(e.s_next.as_array().tobytes())
            h.update(np.array([e.reward, e.done], dtype=np.float64).tobytes())
        return h.hexdigest()


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    total = 0.0
    for k, r in enumerate(rewards):
        total += gamma**k * r
    return total


def decay_sigma(sigma: float, decay: float) -> float:
    if sigma < 0:
        raise ContractViolation(f"sigma must be >= 0, got {sigma}")
    return sigma * decay


@dataclass
class AgentParams:
    actor: Mlp
    critic: Mlp
    target_actor: Mlp
    target_critic: Mlp
    hyper: AgentHyperParams
    actor_opt: OptimizerState
    critic_opt: OptimizerState

    @classmethod
    def create(cls, hyper: AgentHyperParams, rng: np.random.Generator) -> AgentParams:
        actor = init_mlp(
            (STATE_DIM, *hyper.hidden, ACTION_DIM), rng, final_scale=hyper.actor_final_scale
        )
        critic = init_mlp((STATE_DIM + ACTION_DIM, *hyper.hidden, 1), rng)
        return cls(
            actor=actor,
            critic=critic,
            target_actor=actor.copy(),
            target_critic=critic.copy(),
            hyper=hyper,
            actor_opt=init_optimizer(actor, hyper.lr_actor, hyper.optimizer),
            critic_opt=init_optimizer(critic, hyper.lr_critic, hyper.optimizer),
        )


class DdpgAgent:
    def __init__(
        self,
        params: AgentParams,
        ranges: StateRanges,
        noise_rng: np.random.Generator,
        sigma: float | None = None,
    ) -> None:
        self.params = params
        self.ranges = ranges
        self.noise_rng = noise_rng
        self.sigma = params.hyper.sigma0 if sigma is None else sigma

    @property
    def hyper(self) -> AgentHyperParams:
        return self.params.hyper

    # -- policy -----------------------------------------------------------

    def act(self, state: CycleState, sigma: float | None = None) -> RawAction:
        """μ(s) plus Gaussian noise in raw action space; σ = 0 draws nothing."""
        sigma = self.sigma if sigma is None else sigma
        mu = forward(self.params.actor, normalize_state(state.as_array(), self.ranges))
        if sigma > 0:
            mu = mu + self.noise_rng.normal(0.0, sigma, size=ACTION_DIM)
        return RawAction.from_array(mu)

    def decay_sigma(self) -> float:
        self.sigma = decay_sigma(self.sigma, self.hyper.sigma_decay)
        return self.sigma

    # -- critic -----------------------------------------------------------

    def _targets(self, batch: Batch) -> FloatArray:
        p = self.params
        next_actions = forward(p.target_actor, batch.next_states)
        q_next = forward(p.target_critic, np.hstack([batch.next_states, next_actions]))[:, 0]
        return batch.rewards + self.hyper.gamma * (1.0 - batch.dones) * q_next

    def critic_target(self, exp: Experience) -> float:
        return float(self._targets(make_batch([exp], self.ranges))[0])

    def train_critic(self, batch: Batch) -> float:
        """One descent step on the mean squared Bellman error; returns pre-step loss."""
        y = self._targets(batch)
        q, cache = forward_cached(self.params.critic, np.hstack([batch.states, batch.actions]))
        residual = q[:, 0] - y
        loss = float(np.mean(residual**2))
        grads, _ = backward(self.params.critic, cache, (2.0 / len(batch)) * residual[:, None])
        opt_step(self.params.critic, grads, self.params.critic_opt)
        return loss

    # -- actor ------------------------------------------------------------

    def _critic_value_and_action_grad(
        self, states: FloatArray, actions: FloatArray
    ) -> tuple[FloatArray, FloatArray]:
        """Per-sample Q(s, u) and ∂Q/∂u; critic parameters are left untouched."""
        q, cache = forward_cached(self.params.critic, np.hstack([states, actions]))
        _, grad_in = backward(self.params.critic, cache, np.ones_like(q))
        return q[:, 0], grad_in[:, STATE_DIM:]

    def actor_gradient(self, states: FloatArray) -> tuple[Gradients, float]:
        """Gradient of mean Q(s, μ(s)) w.r.t. actor parameters, and that mean."""
        actions, cache = forward_cached(self.params.actor, states)
        q, dq_du = self._critic_value_and_action_grad(states, actions)
        grads, _ = backward(self.params.actor, cache, dq_du / states.shape[0])
        return grads, float(np.mean(q))

    def train_actor(self, batch: Batch) -> float:
        grads, mean_q = self.actor_gradient(batch.states)
        opt_step(self.params.actor, grads, self.params.actor_opt, ascent=True)
        return mean_q

    # -- targets ----------------------------------------------------------

    def polyak_update(self) -> None:
        rho = self.hyper.polyak
        p = self.params
        for src, dst in ((p.actor, p.target_actor), (p.critic, p.target_critic)):
            for theta, theta_t in zip(src.parameters(), dst.parameters(), strict=True):
                theta_t[...] = rho * theta + (1.0 - rho) * theta_t

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        p = self.params
        for net in (p.actor, p.critic, p.target_actor, p.target_critic):
            for arr in net.parameters():
                h.update(arr.tobytes())
        return h.hexdigest()


@dataclass
class TrainingReport:
    critic_losses: list[float] = field(default_factory=list)
    mean_qs: list[float] = field(default_factory=list)
    sampled: list[np.ndarray] = field(default_factory=list)
    sigma: float = 0.0

    @property
    def critic_loss(self) -> float:
        return float(np.mean(self.critic_losses)) if self.critic_losses else float("nan")

    @property
    def mean_q(self) -> float:
        return float(np.mean(self.mean_qs)) if self.mean_qs else float("nan")


def update_on(agent: DdpgAgent, experiences: Sequence[Experience], report: TrainingReport) -> None:
    """Critic, actor and Polyak step on one batch, in that order."""
    batch = make_batch(experiences, agent.ranges)
    report.critic_losses.append(agent.train_critic(batch))
    report.mean_qs.append(agent.train_actor(batch))
    agent.polyak_update()


def end_of_episode_training(
    agent: DdpgAgent,
    buffer: ReplayBuffer,
    episode: Sequence[Experience],
    replay_batches: int,
) -> TrainingReport:
    """One batch from *episode*, *replay_batches* from the whole buffer, then decay σ."""
    report = TrainingReport()
    batch_size = agent.hyper.batch_size
    if episode:
        idx = sample_indices(len(episode), batch_size, buffer.rng, "episode")
        report.sampled.append(idx)
        update_on(agent, [episode[i] for i in idx], report)
    for _ in range(replay_batches):
        if not len(buffer):
            break
        exps, idx = buffer.sample(batch_size)
        report.sampled.append(idx)
        update_on(agent, exps, report)
    report.sigma = agent.decay_sigma()
    return report


# ---------------------------------------------------------------------------
# Per-cycle agent-side bookkeeping
# ---------------------------------------------------------------------------


def quantize32(value: float) -> float:
    return float(np.float32(value))


@dataclass
class _Pending:
    state: CycleState
    action: RawAction
    evaluation: bool


class AgentSession:
    """Turns the stream ``(state, reward, done)`` into actions, experiences and training.

    ``evaluation`` describes the action being requested: evaluation actions
    are noise-free and the experiences they start never enter the buffer.
    """

    def __init__(
        self,
        agent: DdpgAgent,
        buffer: ReplayBuffer,
        *,
        training: bool = True,
        replay_batches: int | None = None,
        quantize: bool = False,
    ) -> None:
        self.agent = agent
        self.buffer = buffer
        self.training = training
        self.replay_batches = agent.hyper.replay_batches if replay_batches is None else replay_batches
        self.quantize = quantize
        self.episode: list[Experience] = []
        self.pending: _Pending | None = None
        self.last_report: TrainingReport | None = None

    def _q_state(self, state: CycleState) -> CycleState:
        if not self.quantize:
            return state
        return CycleState.from_array(state.as_array().astype(np.float32).astype(np.float64))

    def on_cycle(
        self, state: CycleState, reward: float, done: int, evaluation: bool = False
    ) -> RawAction:
        state = self._q_state(state)
        if self.quantize:
            reward = quantize32(reward)
        pending = self.pending
        if pending is not None and not pending.evaluation:
            exp = Experience(pending.state, pending.action, state, min(reward, 0.0), done)
            self.buffer.push(exp)
            self.episode.append(exp)
        if done:
            if self.training and pending is not None and not pending.evaluation and self.episode:
                self.last_report = end_of_episode_training(
                    self.agent, self.buffer, self.episode, self.replay_batches
                )
            self.episode = []
        action = self.agent.act(state, 0.0 if evaluation else None)
        if self.quantize:
            action = RawAction.from_array(action.as_array().astype(np.float32))
        self.pending = _Pending(state, action, evaluation)
        return action

    def reset(self) -> None:
        """Forget the in-flight action; the next call starts a fresh run."""
        self.pending = None
        self.episode = []

    def restore_pending(self, state: CycleState, action: RawAction, evaluation: bool) -> None:
        """Reinstate the in-flight action of an interrupted run."""
        self.pending = _Pending(state, action, evaluation)
        self.episode = []

    def pop_report(self) -> TrainingReport | None:
        report, self.last_report = self.last_report, None
        return report


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _atomic_savez(path: Path, arrays: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _meta_array(meta: dict[str, Any]) -> np.ndarray:
    return np.array(json.dumps(meta, sort_keys=True))


def _read_npz(path: Path, kind: str) -> tuple[dict[str, Any], dict[str, Any]]:
    if not path.is_file():
        raise CheckpointError(f"{kind} not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    if "meta" not in arrays:
        raise CheckpointError(f"{kind} has no header: {path}")
    return arrays, json.loads(str(arrays.pop("meta")))


def save_checkpoint(path: Path, agent: DdpgAgent, meta: dict[str, Any]) -> None:
    """Write all four nets, optimizer moments, σ and the noise RNG state."""
    p = agent.params
    arrays: dict[str, Any] = {}
    for name, net in (
        ("actor", p.actor),
        ("critic", p.critic),
        ("target_actor", p.target_actor),
        ("target_critic", p.target_critic),
    ):
        arrays.update(mlp_to_arrays(net, name))
    arrays.update(optimizer_to_arrays(p.actor_opt, "actor_opt"))
    arrays.update(optimizer_to_arrays(p.critic_opt, "critic_opt"))
    header = {
        **meta,
        "version": CHECKPOINT_VERSION,
        "sigma": agent.sigma,
        "noise_rng": agent.noise_rng.bit_generator.state,
    }
    arrays["meta"] = _meta_array(header)
    _atomic_savez(path, arrays)
    logger.info("Checkpoint written", extra={"path": str(path), "sigma": agent.sigma})


def load_checkpoint(
    path: Path, hyper: AgentHyperParams, ranges: StateRanges, expected_hash: str | None = None
) -> tuple[DdpgAgent, dict[str, Any]]:
    arrays, meta = _read_npz(path, "checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise CheckpointError("checkpoint was written under a different configuration")
    params = AgentParams(
        actor=mlp_from_arrays(arrays, "actor"),
        critic=mlp_from_arrays(arrays, "critic"),
        target_actor=mlp_from_arrays(arrays, "target_actor"),
        target_critic=mlp_from_arrays(arrays, "target_critic"),
        hyper=hyper,
        actor_opt=optimizer_from_arrays(arrays, "actor_opt", hyper.optimizer),
        critic_opt=optimizer_from_arrays(arrays, "critic_opt", hyper.optimizer),
    )
    if params.actor.topology != (STATE_DIM, *hyper.hidden, ACTION_DIM):
        raise CheckpointError(f"actor topology {params.actor.topology} does not match config")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["noise_rng"]
    return DdpgAgent(params, ranges, rng, sigma=float(meta["sigma"])), meta


def save_buffer(path: Path, buffer: ReplayBuffer) -> None:
    items = buffer.items()
    arrays: dict[str, Any] = {
        "s_prev": np.array([e.s_prev.as_array() for e in items]).reshape(-1, STATE_DIM),
        "u": np.array([e.u.values for e in items]).reshape(-1, ACTION_DIM),
        "s_next": np.array([e.s_next.as_array() for e in items]).reshape(-1, STATE_DIM),
        "reward": np.array([e.reward for e in items], dtype=np.float64),
        "done": np.array([e.done for e in items], dtype=np.int8),
    }
    arrays["meta"] = _meta_array(
        {
            "version": BUFFER_VERSION,
            "capacity": buffer.capacity,
            "rng": buffer.rng.bit_generator.state,
        }
    )
    _atomic_savez(path, arrays)


def load_buffer(path: Path) -> ReplayBuffer:
    arrays, meta = _read_npz(path, "buffer snapshot")
    if meta.get("version") != BUFFER_VERSION:
        raise CheckpointError(f"unsupported buffer version {meta.get('version')}")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng"]
    buffer = ReplayBuffer(int(meta["capacity"]), rng)
    for s, u, s2, r, d in zip(
        arrays["s_prev"], arrays["u"], arrays["s_next"], arrays["reward"], arrays["done"], strict=True
    ):
        buffer.push(
            Experience(CycleState.from_array(s), RawAction.from_array(u), CycleState.from_array(s2), float(r), int(d))
        )
    return buffer
