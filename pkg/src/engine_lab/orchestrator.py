"""Episode loop, run modes, persistence and resumption.

One cycle of the loop: the pending raw action (computed from the state the
previous cycle produced) goes through the safety monitor, the filtered action
is applied to the environment, the reward is evaluated and the resulting
state is handed back to the policy, which returns the next pending action.
Training happens inside the policy at episode boundaries.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Protocol

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import AGENT_SECTIONS, MATRIX_SECTIONS, EpisodePlan, LabConfig, config_hash, config_to_dict
from .core import (
    STATE_FIELDS,
    ActionVector,
    CycleEnvironment,
    CycleOutputs,
    CycleState,
    FloatArray,
    RawAction,
)
from .ddpg import (
    AgentParams,
    AgentSession,
    DdpgAgent,
    Experience,
    ReplayBuffer,
    TrainingReport,
    load_buffer,
    load_checkpoint,
    save_buffer,
    save_checkpoint,
    update_on,
)
from .engine_sim import EngineSim, check_safety_structure
from .error_service import (
    CheckpointError,
    ConfigError,
    ContractViolation,
    EnvFault,
    set_request_context,
)
from .measurement import MeasurementResult, run_measurement, setpoint_schedule
from .metrics import atomic_write_json, export_metrics, summarize
from .reward import RewardParams, total_reward
from .safety import (
    FilterResult,
    LimitationMatrices,
    SafetyMonitor,
    load_matrices,
    raw_from_action,
    save_matrices,
)

logger = logging.getLogger(__name__)

RunMode = Literal["measure", "train", "adapt", "validate"]
EpisodeKind = Literal["train", "validation"]

SEED_STREAMS: tuple[str, ...] = ("noise", "sampling", "env", "profiles", "init")
RUN_STATE_VERSION = 1

CYCLES_CSV = "cycles.csv"
EPISODES_CSV = "episodes.csv"
CHECKPOINT_FILE = "checkpoint.npz"
BUFFER_FILE = "buffer.npz"
RUN_STATE_FILE = "run_state.json"
MATRICES_FILE = "mats.csv"


# ---------------------------------------------------------------------------
# Seeds and setpoint profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeedStreams:
    """Named, independent random streams derived from one master seed."""

    seed: int

    def sequence(self, name: str, *key: int) -> np.random.SeedSequence:
        if name not in SEED_STREAMS:
            raise ContractViolation(f"unknown seed stream {name!r}")
        return np.random.SeedSequence(self.seed, spawn_key=(SEED_STREAMS.index(name), *key))

    def rng(self, name: str, *key: int) -> np.random.Generator:
        return np.random.default_rng(self.sequence(name, *key))


def training_profile(plan: EpisodePlan, episode: int, streams: SeedStreams) -> FloatArray:
    """Random setpoint steps for *episode*; depends only on the seed and the index."""
    schedule = setpoint_schedule(plan.setpoints, plan.dwell_min, plan.dwell_max, streams.rng("profiles", episode))
    return np.fromiter(itertools.islice(schedule, plan.cycles_per_episode), dtype=np.float64)


def validation_profile(plan: EpisodePlan) -> FloatArray:
    """Up-and-down staircase over the sorted setpoints, identical for every validation."""
    steps = sorted(plan.setpoints)
    order = steps + steps[-2:0:-1]
    n_steps = math.ceil(plan.validation_cycles / plan.validation_dwell)
    values = [order[i % len(order)] for i in range(n_steps)]
    return np.repeat(np.asarray(values, dtype=np.float64), plan.validation_dwell)[: plan.validation_cycles]


def episode_kind(position: int, plan: EpisodePlan) -> EpisodeKind:
    """Kind of the episode at *position* in the endless run schedule."""
    if plan.initial_validation:
        if position == 0:
            return "validation"
        position -= 1
    if plan.validation_every == 0:
        return "train"
    return "validation" if position % (plan.validation_every + 1) == plan.validation_every else "train"


def episode_profile(plan: EpisodePlan, position: int, streams: SeedStreams) -> FloatArray:
    if episode_kind(position, plan) == "validation":
        return validation_profile(plan)
    return training_profile(plan, position, streams)


# ---------------------------------------------------------------------------
# The cycle loop
# ---------------------------------------------------------------------------


class CyclePolicy(Protocol):
    """In-process :class:`AgentSession` or the UDP client; ``None`` means fallback."""

    def on_cycle(
        self, state: CycleState, reward: float, done: int, evaluation: bool = False
    ) -> RawAction | None: ...

    def pop_report(self) -> TrainingReport | None: ...


@dataclass
class EpisodeResult:
    position: int
    kind: EpisodeKind
    rows: list[dict[str, Any]]
    summary: dict[str, Any]
    report: TrainingReport | None = None


def warm_up(env: CycleEnvironment, plan: EpisodePlan, bounds_start: ActionVector, setpoint: float) -> CycleState:
    """Run the start-point action for a few cycles and return the observed state."""
    out = None
    for _ in range(plan.warmup_cycles):
        out = env.step(bounds_start, setpoint)
    assert out is not None
    return CycleState.from_outputs(out, setpoint, setpoint)


def _state_columns(state: CycleState) -> dict[str, float]:
    return {f"s_{name}": float(v) for name, v in zip(STATE_FIELDS, state.as_array(), strict=True)}


class CycleLoop:
    """Owns the running state between cycles; one instance per run."""

    def __init__(
        self,
        cfg: LabConfig,
        env: CycleEnvironment,
        policy: CyclePolicy,
        monitor: SafetyMonitor,
        reward_params: RewardParams,
        sigma_of: Callable[[], float] | None = None,
    ) -> None:
        self.cfg = cfg
        self.env = env
        self.policy = policy
        self.monitor = monitor
        self.reward_params = reward_params
        self.sigma_of = sigma_of
        self.state: CycleState | None = None
        self.pending: RawAction | None = None
        self.run_cycle = 0

    def start(self, setpoint: float, evaluation: bool) -> None:
        start = self.cfg.bounds.start_point(setpoint)
        self.state = warm_up(self.env, self.cfg.plan, start, setpoint)
        self.pending = self.policy.on_cycle(self.state, 0.0, 0, evaluation)

    def resume(self, state: CycleState, pending: RawAction | None, run_cycle: int) -> None:
        self.state, self.pending, self.run_cycle = state, pending, run_cycle

    def _filter(self, state: CycleState, sp: float) -> tuple[FilterResult | None, ActionVector]:
        if self.pending is None:
            return None, self.cfg.bounds.start_point(sp)
        res = self.monitor.filter(self.pending, state)
        return res, res.u_safe

    def run_episode(
        self,
        position: int,
        kind: EpisodeKind,
        profile: FloatArray,
        next_setpoint: float,
        next_evaluation: bool,
    ) -> EpisodeResult:
        if self.state is None:
            raise ContractViolation("cycle loop used before start()")
        evaluation = kind == "validation"
        sigma = 0.0 if evaluation else (self.sigma_of() if self.sigma_of is not None else float("nan"))
        rows: list[dict[str, Any]] = []
        n = len(profile)
        for i in range(n):
            state, sp = self.state, float(profile[i])
            raw = self.pending
            res, action = self._filter(state, sp)
            out = self.env.step(action, sp)
            delta = res.delta_r_sf if res is not None else 0.0
            breakdown = total_reward(
                out, sp, state.alpha50_prev, delta, self.reward_params, self.cfg.engine_constants
            )
            done = int(i == n - 1)
            sp_next = float(profile[i + 1]) if not done else next_setpoint
            next_state = CycleState.from_outputs(out, sp, sp_next)
            rows.append(
                {
                    "run_cycle": self.run_cycle,
                    "episode": position,
                    "kind": kind,
                    "cycle": i,
                    **_state_columns(state),
                    "raw_0": raw.values[0] if raw is not None else float("nan"),
                    "raw_1": raw.values[1] if raw is not None else float("nan"),
                    "raw_2": raw.values[2] if raw is not None else float("nan"),
                    "alpha_nvo": action.alpha_nvo,
                    "t_inj_g": action.t_inj_g,
                    "t_inj_e": action.t_inj_e,
                    "replaced": int(res.replaced) if res is not None else 0,
                    "fallback": int(res is None),
                    "class_index": res.class_index if res is not None else -1,
                    "norm": res.norm if res is not None else float("nan"),
                    "r_safe": res.r_safe if res is not None else float("nan"),
                    "delta_r_sf": delta,
                    "alpha50": out.alpha50,
                    "q": out.q,
                    "pmi": out.pmi,
                    "dpmax": out.dpmax,
                    "ion_max": out.ion_max,
                    "ion_int": out.ion_int,
                    "misfire": int(out.misfire),
                    "m_g": out.m_g,
                    "m_e": out.m_e,
                    "eta": breakdown.eta,
                    "x_eth": breakdown.x_eth,
                    **breakdown.as_row(),
                    "done": done,
                    "pmi_sp_next": sp_next,
                }
            )
            self.pending = self.policy.on_cycle(
                next_state, breakdown.total, done, next_evaluation if done else evaluation
            )
            self.state = next_state
            self.run_cycle += 1
        report = self.policy.pop_report()
        frame = pd.DataFrame(rows)
        summary: dict[str, Any] = {
            "episode": position,
            "kind": kind,
            "sigma": sigma,
            **summarize(frame, self.cfg.engine_constants, self.reward_params.x_eth_sp),
            "replacements": int(frame["replaced"].sum()),
            "fallbacks": int(frame["fallback"].sum()),
            "critic_loss": report.critic_loss if report is not None else float("nan"),
            "mean_q": report.mean_q if report is not None else float("nan"),
        }
        return EpisodeResult(position, kind, rows, summary, report)


# ---------------------------------------------------------------------------
# CSV streams and persisted run state
# ---------------------------------------------------------------------------


def append_csv(path: Path, rows: list[dict[str, Any]]) -> None:
    if not rows:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, mode="a", header=not path.exists(), index=False, float_format="%.17g")


def truncate_csv(path: Path, column: str, below: int) -> None:
    """Drop rows whose *column* is ``>= below`` (episodes written after the last checkpoint)."""
    if not path.is_file():
        return
    frame = pd.read_csv(path)
    kept = frame[frame[column] < below]
    if len(kept) != len(frame):
        logger.warning("Dropping log rows past the last checkpoint", extra={"path": str(path), "rows": len(frame) - len(kept)})
        kept.to_csv(path, index=False, float_format="%.17g")


@dataclass
class RunState:
    mode: RunMode
    config_hash: str
    position: int = 0
    trained: int = 0
    run_cycle: int = 0
    state: list[float] | None = None
    pending_action: list[float] | None = None
    pending_evaluation: bool = False
    sim: dict[str, Any] = field(default_factory=dict)

    def save(self, path: Path) -> None:
        atomic_write_json(path, {"version": RUN_STATE_VERSION, **self.__dict__})

    @classmethod
    def load(cls, path: Path) -> RunState:
        if not path.is_file():
            raise CheckpointError(f"nothing to resume: {path} is missing")
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.pop("version", None) != RUN_STATE_VERSION:
            raise CheckpointError(f"unsupported run-state version in {path}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Replay pre-fill from a measurement log
# ---------------------------------------------------------------------------


def load_prefill(path: Path, cfg: LabConfig, reward_params: RewardParams) -> list[Experience]:
    """Experiences from a cycle log, raw actions recovered by inverting the tanh map.

    Rewards are recomputed with *reward_params* and a zero safety distance.
    """
    if not path.is_file():
        raise ConfigError(f"prefill log not found: {path}")
    frame = pd.read_csv(path)
    needed = [f"s_{n}" for n in STATE_FIELDS] + ["alpha_nvo", "t_inj_g", "t_inj_e", "pmi_sp_next"]
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise ConfigError(f"prefill log {path} lacks columns {missing}")
    exps: list[Experience] = []
    last = len(frame) - 1
    for i, row in enumerate(frame.itertuples(index=False)):
        r = row._asdict()
        s_prev = CycleState.from_array([r[f"s_{n}"] for n in STATE_FIELDS])
        action = ActionVector(r["alpha_nvo"], r["t_inj_g"], r["t_inj_e"])
        out = CycleOutputs(
            alpha50=r["alpha50"],
            q=r["q"],
            pmi=r["pmi"],
            dpmax=r["dpmax"],
            ion_max=r["ion_max"],
            ion_int=r["ion_int"],
            misfire=bool(r["misfire"]),
            m_g=r["m_g"],
            m_e=r["m_e"],
        )
        sp = s_prev.pmi_sp
        s_next = CycleState.from_outputs(out, sp, float(r["pmi_sp_next"]))
        reward = total_reward(out, sp, s_prev.alpha50_prev, 0.0, reward_params, cfg.engine_constants).total
        exps.append(Experience(s_prev, raw_from_action(action, cfg.bounds), s_next, reward, int(i == last)))
    logger.info("Replay buffer pre-fill loaded", extra={"path": str(path), "experiences": len(exps)})
    return exps


def offline_pretrain(agent: DdpgAgent, buffer: ReplayBuffer, batches: int) -> TrainingReport:
    report = TrainingReport()
    for _ in range(batches):
        exps, idx = buffer.sample(agent.hyper.batch_size)
        report.sampled.append(idx)
        update_on(agent, exps, report)
    logger.info("Offline pre-training done", extra={"batches": batches, "critic_loss": report.critic_loss})
    return report


# ---------------------------------------------------------------------------
# Run modes
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    episodes: list[dict[str, Any]]
    summary: dict[str, Any] | None = None
    paths: dict[str, str] = field(default_factory=dict)


def require_matrices(cfg: LabConfig, path: Path) -> LimitationMatrices:
    return load_matrices(path, cfg.classifier, cfg.directions, config_hash(cfg, MATRIX_SECTIONS))


def prepare_agent(cfg: LabConfig, mode: RunMode, checkpoint: Path | None = None) -> DdpgAgent:
    """Fresh agent for training, or a stored one with σ reset for adaptation and validation."""
    streams = SeedStreams(cfg.seed)
    if checkpoint is None:
        if mode != "train":
            raise ConfigError(f"{mode} needs --checkpoint of a trained agent")
        params = AgentParams.create(cfg.agent, streams.rng("init"))
        return DdpgAgent(params, cfg.state_ranges, streams.rng("noise"))
    agent, _ = load_checkpoint(checkpoint, cfg.agent, cfg.state_ranges, config_hash(cfg, AGENT_SECTIONS))
    if mode == "adapt":
        agent.sigma = cfg.plan.adapt_sigma
        agent.noise_rng = streams.rng("noise")
    return agent


def agent_session(cfg: LabConfig, agent: DdpgAgent, *, training: bool = True, quantize: bool = False) -> AgentSession:
    buffer = ReplayBuffer(cfg.agent.buffer_capacity, SeedStreams(cfg.seed).rng("sampling"))
    return AgentSession(agent, buffer, training=training, quantize=quantize)


def _agent_meta(cfg: LabConfig, mode: RunMode, run: RunState) -> dict[str, Any]:
    return {
        "config_hash": config_hash(cfg, AGENT_SECTIONS),
        "mode": mode,
        "position": run.position,
        "trained": run.trained,
    }


def _write_config(cfg: LabConfig, out_dir: Path) -> None:
    atomic_write_json(out_dir / "config.json", config_to_dict(cfg))


def run_episodes(
    cfg: LabConfig,
    mode: RunMode,
    out_dir: Path,
    *,
    episodes: int,
    matrices: Path | None = None,
    checkpoint: Path | None = None,
    resume: bool = False,
    prefill: Path | None = None,
    offline_batches: int | None = None,
    policy: CyclePolicy | None = None,
    quantize: bool = False,
    progress: bool = True,
) -> RunResult:
    """Shared driver of ``train`` and ``adapt``.

    With an external *policy* (the UDP client) no agent is held in-process,
    so neither checkpoints nor resumption are available here.
    """
    if mode not in ("train", "adapt"):
        raise ContractViolation(f"run_episodes drives train/adapt, not {mode!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    set_request_context(mode=mode)
    streams = SeedStreams(cfg.seed)
    plan = cfg.plan
    full_hash = config_hash(cfg)
    training_mode = mode == "train"

    if training_mode:
        mats: LimitationMatrices | None = require_matrices(cfg, matrices or out_dir / MATRICES_FILE)
        reward_params = cfg.reward
    else:
        mats = None
        reward_params = cfg.reward.with_enabled(safety=False, ethanol=True)
    monitor = SafetyMonitor(mats, cfg.safety, cfg.bounds, enabled=training_mode)
    env = EngineSim(cfg.engine_sim, cfg.bounds, cfg.engine_constants, rng=streams.rng("env"))
    if training_mode:
        check_safety_structure(cfg.engine_sim, cfg.bounds, cfg.engine_constants)

    agent: DdpgAgent | None = None
    session: AgentSession | None = None
    run = RunState(mode=mode, config_hash=full_hash)
    run_state_path = out_dir / RUN_STATE_FILE
    if policy is not None:
        if resume:
            raise ConfigError("resume is not available when the agent runs behind the UDP link")
    elif resume:
        run = RunState.load(run_state_path)
        if run.config_hash != full_hash or run.mode != mode:
            raise CheckpointError("run state was written by a different configuration or mode")
        agent, _ = load_checkpoint(out_dir / CHECKPOINT_FILE, cfg.agent, cfg.state_ranges, config_hash(cfg, AGENT_SECTIONS))
        buffer = load_buffer(out_dir / BUFFER_FILE)
        session = AgentSession(agent, buffer, training=True, quantize=quantize)
        truncate_csv(out_dir / CYCLES_CSV, "episode", run.position)
        truncate_csv(out_dir / EPISODES_CSV, "episode", run.position)
        logger.info("Resuming run", extra={"position": run.position, "trained": run.trained})
    else:
        for stale in (CYCLES_CSV, EPISODES_CSV):
            (out_dir / stale).unlink(missing_ok=True)
        agent = prepare_agent(cfg, mode, None if training_mode else checkpoint)
        session = agent_session(cfg, agent, quantize=quantize)
        buffer = session.buffer
        if prefill is not None:
            buffer.extend(load_prefill(prefill, cfg, reward_params))
        batches = plan.offline_batches if offline_batches is None else offline_batches
        if batches and len(buffer):
            offline_pretrain(agent, buffer, batches)
    _write_config(cfg, out_dir)

    active: CyclePolicy | None = policy if policy is not None else session
    assert active is not None
    sigma_of = (lambda: agent.sigma) if agent is not None else None
    loop = CycleLoop(cfg, env, active, monitor, reward_params, sigma_of)
    if resume and session is not None:
        state = CycleState.from_array(run.state or [])
        pending = RawAction.from_array(run.pending_action) if run.pending_action is not None else None
        if pending is not None:
            session.restore_pending(state, pending, run.pending_evaluation)
        env.restore(run.sim)
        loop.resume(state, pending, run.run_cycle)
    else:
        first = episode_profile(plan, run.position, streams)
        loop.start(float(first[0]), episode_kind(run.position, plan) == "validation")

    results: list[dict[str, Any]] = []
    bar = tqdm(total=episodes, initial=min(run.trained, episodes), desc=f"[{mode}]", unit="ep", disable=not progress)
    try:
        while True:
            kind = episode_kind(run.position, plan)
            if kind == "train" and run.trained >= episodes:
                break
            set_request_context(mode=mode, episode=run.position)
            profile = episode_profile(plan, run.position, streams)
            nxt = run.position + 1
            next_profile = episode_profile(plan, nxt, streams)
            digest = None
            if kind == "validation" and agent is not None and session is not None:
                digest = (agent.parameter_digest(), session.buffer.digest())
            result = loop.run_episode(
                run.position, kind, profile, float(next_profile[0]), episode_kind(nxt, plan) == "validation"
            )
            if digest is not None and agent is not None and session is not None:
                if digest != (agent.parameter_digest(), session.buffer.digest()):
                    raise ContractViolation("validation episode changed agent parameters or buffer")
            append_csv(out_dir / CYCLES_CSV, result.rows)
            append_csv(out_dir / EPISODES_CSV, [result.summary])
            results.append(result.summary)
            if kind == "train":
                run.trained += 1
                bar.update(1)
            else:
                logger.info(
                    "Validation episode",
                    extra={
                        "episode": run.position,
                        "rmse_pmi": result.summary["rmse_pmi"],
                        "dp_violations": result.summary["dp_violations"],
                        "ethanol_rmse": result.summary["ethanol_rmse"],
                    },
                )
            run.position = nxt
            if agent is not None and session is not None and loop.state is not None:
                run.run_cycle = loop.run_cycle
                run.state = loop.state.as_array().tolist()
                run.pending_action = list(loop.pending.values) if loop.pending is not None else None
                run.pending_evaluation = episode_kind(nxt, plan) == "validation"
                run.sim = env.memory()
                save_checkpoint(out_dir / CHECKPOINT_FILE, agent, _agent_meta(cfg, mode, run))
                save_buffer(out_dir / BUFFER_FILE, session.buffer)
                run.save(run_state_path)
    finally:
        bar.close()
    exported = export_metrics(
        out_dir / CYCLES_CSV, out_dir, cfg.engine_constants, reward_params.x_eth_sp
    ) if (out_dir / CYCLES_CSV).is_file() else {"summary": None, "paths": {}}
    return RunResult(out_dir, results, exported["summary"], exported["paths"])


def run_training(cfg: LabConfig, out_dir: Path, episodes: int | None = None, **kwargs: Any) -> RunResult:
    """Train with the safety monitor active; needs measured limitation matrices."""
    return run_episodes(cfg, "train", out_dir, episodes=cfg.plan.train_episodes if episodes is None else episodes, **kwargs)


def run_adaptation(
    cfg: LabConfig, checkpoint: Path | None, out_dir: Path, episodes: int | None = None, **kwargs: Any
) -> RunResult:
    """Continue training a converged agent with σ reduced, no monitor and the ethanol objective on."""
    return run_episodes(
        cfg,
        "adapt",
        out_dir,
        episodes=cfg.plan.adapt_episodes if episodes is None else episodes,
        checkpoint=checkpoint,
        **kwargs,
    )


def run_validation(
    cfg: LabConfig,
    checkpoint: Path,
    out_dir: Path,
    *,
    matrices: Path | None = None,
    monitor_enabled: bool = True,
    progress: bool = True,
) -> RunResult:
    """One noise-free validation episode of a stored agent; nothing is trained."""
    out_dir.mkdir(parents=True, exist_ok=True)
    set_request_context(mode="validate")
    streams = SeedStreams(cfg.seed)
    agent = prepare_agent(cfg, "validate", checkpoint)
    mats = require_matrices(cfg, matrices or out_dir / MATRICES_FILE) if monitor_enabled else None
    monitor = SafetyMonitor(mats, cfg.safety, cfg.bounds, enabled=monitor_enabled)
    env = EngineSim(cfg.engine_sim, cfg.bounds, cfg.engine_constants, rng=streams.rng("env"))
    session = agent_session(cfg, agent, training=False)
    loop = CycleLoop(cfg, env, session, monitor, cfg.reward)
    profile = validation_profile(cfg.plan)
    loop.start(float(profile[0]), evaluation=True)
    (out_dir / CYCLES_CSV).unlink(missing_ok=True)
    (out_dir / EPISODES_CSV).unlink(missing_ok=True)
    with tqdm(total=1, desc="[validate]", unit="ep", disable=not progress) as bar:
        result = loop.run_episode(0, "validation", profile, float(profile[0]), True)
        bar.update(1)
    append_csv(out_dir / CYCLES_CSV, result.rows)
    append_csv(out_dir / EPISODES_CSV, [result.summary])
    exported = export_metrics(out_dir / CYCLES_CSV, out_dir, cfg.engine_constants, cfg.reward.x_eth_sp)
    logger.info("Validation finished", extra={"rmse_pmi": result.summary["rmse_pmi"]})
    return RunResult(out_dir, [result.summary], exported["summary"], exported["paths"])


def run_measurement_mode(
    cfg: LabConfig,
    cycles: int,
    matrices_out: Path,
    log_out: Path,
    *,
    progress: bool = True,
) -> MeasurementResult:
    """Learn limitation matrices on the simulator and write them plus the cycle log.

    An environment fault still writes the partial matrices before raising
    :class:`EnvFault`.
    """
    set_request_context(mode="measure")
    streams = SeedStreams(cfg.seed)
    check_safety_structure(cfg.engine_sim, cfg.bounds, cfg.engine_constants)
    env = EngineSim(cfg.engine_sim, cfg.bounds, cfg.engine_constants, rng=streams.rng("env"))
    mats = LimitationMatrices.initial(cfg.classifier, cfg.directions)
    sp0 = float(cfg.plan.setpoints[0])
    state = warm_up(env, cfg.plan, cfg.bounds.start_point(sp0), sp0)
    with tqdm(total=cycles, desc="[measure]", unit="cyc", disable=not progress) as bar:
        result = run_measurement(
            env,
            mats,
            cfg.measurement,
            cfg.bounds,
            state,
            cycles,
            streams.rng("profiles"),
            cfg.plan.setpoints,
            on_cycle=lambda _row: bar.update(1),
        )
    save_matrices(
        matrices_out,
        result.mats,
        config_hash(cfg, MATRIX_SECTIONS),
        partial=result.partial,
        extra={"cycles": result.cycles, "fault": result.fault, "seed": cfg.seed},
    )
    log_out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(result.rows).to_csv(log_out, index=False, float_format="%.17g")
    visited = len({(row["class_index"], row["direction_index"]) for row in result.rows})
    limited = int(np.count_nonzero(result.mats.z_lim))
    logger.info(
        "Measurement finished",
        extra={"cycles": result.cycles, "visited_cells": visited, "limited_cells": limited},
    )
    if result.fault is not None:
        raise EnvFault(f"measurement stopped after {result.cycles} cycles: {result.fault}")
    return result

