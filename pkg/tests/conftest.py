"""Shared fixtures: default and small configurations, a seeded RNG, scripted environments and finite-difference helpers."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import replace

import numpy as np
import pytest

from engine_lab.config import EpisodePlan, LabConfig, default_config
from engine_lab.core import ActionBounds, ActionVector, CycleOutputs, CycleState, EngineConstants
from engine_lab.nn import Mlp, forward_cached


@pytest.fixture
def cfg() -> LabConfig:
    return default_config()


@pytest.fixture
def small_cfg() -> LabConfig:
    """Default physics with short episodes and a small agent, for end-to-end runs in seconds."""
    base = default_config()
    plan = EpisodePlan(
        cycles_per_episode=40,
        dwell_min=5,
        dwell_max=15,
        validation_every=2,
        validation_dwell=10,
        validation_cycles=30,
        train_episodes=2,
        adapt_episodes=2,
        measure_cycles=400,
        warmup_cycles=3,
    )
    agent = replace(base.agent, hidden=(16, 16), batch_size=16, replay_batches=2, buffer_capacity=2000)
    return replace(base, plan=plan, agent=agent, seed=7)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def bounds() -> ActionBounds:
    return ActionBounds()


@pytest.fixture
def constants() -> EngineConstants:
    return EngineConstants()


def make_state(alpha50: float = 6.0, q: float = 220.0, pmi: float = 3.0, sp: float = 3.0) -> CycleState:
    return CycleState(
        alpha50_prev=alpha50,
        q_prev=q,
        pmi_prev=pmi,
        dpmax_prev=1.5,
        ion_max_prev=2.0,
        ion_int_prev=11.0,
        pmi_sp_prev=sp,
        pmi_sp=sp,
    )


def make_outputs(**overrides: float) -> CycleOutputs:
    values: dict[str, float] = {
        "alpha50": 6.0,
        "q": 220.0,
        "pmi": 3.0,
        "dpmax": 1.5,
        "ion_max": 2.0,
        "ion_int": 11.0,
        "misfire": False,
        "m_g": 5.28,
        "m_e": 0.0,
    }
    values.update(overrides)
    return CycleOutputs(**values)  # type: ignore[arg-type]


class ScriptedEnv:
    """Environment whose outputs are a function of the applied action."""

    def __init__(self, respond: Callable[[ActionVector, float], CycleOutputs]) -> None:
        self.respond = respond
        self.actions: list[ActionVector] = []

    def step(self, action: ActionVector, pmi_sp: float) -> CycleOutputs:
        self.actions.append(action)
        return self.respond(action, pmi_sp)


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def activation_pattern(net: Mlp, x: np.ndarray) -> bytes:
    _, cache = forward_cached(net, x)
    return b"".join((z > 0.0).tobytes() for z in cache.pre_activations[:-1])


def central_difference(
    f: Callable[[], float], flat: np.ndarray, j: int, pattern: Callable[[], bytes], eps: float = 1e-6
) -> float | None:
    """(f(θ+ε) - f(θ-ε)) / 2ε for entry *j* of *flat*, or None when a ReLU switches in between."""
    saved = flat[j]
    base = pattern()
    flat[j] = saved + eps
    up, up_pattern = f(), pattern()
    flat[j] = saved - eps
    down, down_pattern = f(), pattern()
    flat[j] = saved
    if up_pattern != base or down_pattern != base:
        return None
    return (up - down) / (2 * eps)
