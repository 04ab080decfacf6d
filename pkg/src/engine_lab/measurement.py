"""Dynamic limit-learning measurement.

Each (class, direction) cell walks a probe radius outward from the start point
in steps of ``delta_r_expl``, turns around at the range limits or after an
unsafe cycle, and keeps R_Lim as the running mean of the radii accepted by the
update branches.  The stored radius R is the radius of the *next* probe of
that cell.

A cell without any limit yet (Z_Lim = 0) is still on its first outward sweep:
safe probes there only count once the walk has turned back toward the start
point, so the sweep contributes the radius where it stopped rather than every
radius on the way out.  Once limited, an inward walk that comes back safe to
R_Lim turns outward again and keeps probing around the limit.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field, replace
from typing import Any, Literal

import numpy as np

from .core import (
    STATE_FIELDS,
    ActionBounds,
    ActionVector,
    CycleEnvironment,
    CycleOutputs,
    CycleState,
    classify_state,
    denormalize_action,
)
from .error_service import ConfigError
from .safety import LimitationMatrices

logger = logging.getLogger(__name__)

DirectionPolicy = Literal["random", "round_robin"]
_EDGE = 1e-12


@dataclass(frozen=True)
class MeasurementConfig:
    delta_r_expl: float = 0.02
    r_max: float = 1.0
    direction_policy: DirectionPolicy = "random"
    dpmax_lim: float = 5.0
    misfire_tolerance: float = 0.3
    misfire_radius_scale: float = 0.5
    min_z_per_cell: int = 0
    dwell_min: int = 20
    dwell_max: int = 100

    def __post_init__(self) -> None:
        if not 0 < self.delta_r_expl <= self.r_max <= 1:
            raise ConfigError("measurement: need 0 < delta_r_expl <= r_max <= 1")
        if self.direction_policy not in ("random", "round_robin"):
            raise ConfigError(f"measurement.direction_policy: unknown {self.direction_policy!r}")
        if not 0 < self.misfire_radius_scale <= 1:
            raise ConfigError("measurement.misfire_radius_scale: must lie in (0, 1]")
        if not 1 <= self.dwell_min <= self.dwell_max:
            raise ConfigError("measurement: need 1 <= dwell_min <= dwell_max")


def is_safe(out: CycleOutputs, setpoint: float, cfg: MeasurementConfig) -> bool:
    return out.dpmax <= cfg.dpmax_lim and out.pmi >= setpoint - cfg.misfire_tolerance


def measurement_step(
    mats: LimitationMatrices,
    k: int,
    j: int,
    observed_safe: bool,
    cfg: MeasurementConfig,
    radius_scale: float = 1.0,
) -> LimitationMatrices:
    """Record the probe at the stored radius of cell (k, j), then advance it.

    ``radius_scale`` is the factor the probe radius was shrunk by; the
    limit statistics use the radius actually applied.
    """
    r = float(mats.r[k, j]) * radius_scale
    r_lim = float(mats.r_lim[k, j])
    z = int(mats.z_lim[k, j])
    o = int(mats.o[k, j])
    if observed_safe:
        if r > r_lim and (z > 0 or o < 0):
            r_lim = (z * r_lim + r) / (z + 1)
            z += 1
        if o < 0 and z > 0 and r <= r_lim:
            o = 1
    else:
        o = -1
        if r < r_lim:
            r_lim = (z * r_lim + r) / (z + 1)
            z += 1
    r_next = float(mats.r[k, j]) + o * cfg.delta_r_expl
    if r_next <= _EDGE:
        r_next, o = 0.0, 1
    elif r_next >= cfg.r_max - _EDGE:
        r_next, o = cfg.r_max, -1
    return mats.with_cell(k, j, r=r_next, r_lim=r_lim, z_lim=z, o=o)


def next_probe_action(
    mats: LimitationMatrices,
    state: CycleState,
    setpoint: float,
    direction: int,
    bounds: ActionBounds,
    radius_scale: float = 1.0,
) -> ActionVector:
    """Start point of *setpoint* displaced by ``r·v`` in normalized space."""
    k = classify_state(state, mats.classifier)
    u_norm = radius_scale * float(mats.r[k, direction]) * mats.directions.vectors[direction]
    clipped = np.clip(u_norm, -1.0, 1.0)
    if np.any(clipped != u_norm):
        logger.info("Probe clipped to action bounds", extra={"class_index": k, "direction": direction})
    return denormalize_action(clipped, bounds.start_point(setpoint), bounds)


def setpoint_schedule(
    setpoints: tuple[float, ...], dwell_min: int, dwell_max: int, rng: np.random.Generator
) -> Iterator[float]:
    """Endless random steps over *setpoints*, each held for a random dwell."""
    while True:
        sp = float(setpoints[int(rng.integers(len(setpoints)))])
        for _ in range(int(rng.integers(dwell_min, dwell_max + 1))):
            yield sp


@dataclass
class MeasurementResult:
    mats: LimitationMatrices
    rows: list[dict[str, Any]] = field(default_factory=list)
    accepted: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    partial: bool = False
    fault: str | None = None
    cycles: int = 0
    final_state: CycleState | None = None


def _all_cells_confident(mats: LimitationMatrices, min_z: int) -> bool:
    visited = mats.z_lim.sum(axis=1) > 0
    return bool(visited.any() and np.all(mats.z_lim[visited] >= min_z))


def run_measurement(
    env: CycleEnvironment,
    mats: LimitationMatrices,
    cfg: MeasurementConfig,
    bounds: ActionBounds,
    initial_state: CycleState,
    budget: int,
    rng: np.random.Generator,
    setpoints: tuple[float, ...],
    on_cycle: Callable[[dict[str, Any]], None] | None = None,
) -> MeasurementResult:
    """Probe the environment for *budget* cycles and learn the limitation matrices.

    Each cycle: classify the previous cycle, pick a direction, apply the probe,
    judge safety and update the cell.  Log rows carry the state before and
    after each probe so they can later pre-fill a replay buffer.  An
    environment fault stops the loop and returns the matrices flagged partial.
    """
    result = MeasurementResult(mats=mats)
    state = initial_state
    schedule = setpoint_schedule(setpoints, cfg.dwell_min, cfg.dwell_max, rng)
    n_dirs = len(mats.directions)
    sp = next(schedule)
    state = replace(state, pmi_sp=sp)
    misfire_class = mats.classifier.misfire_class
    for cycle in range(budget):
        k = classify_state(state, result.mats.classifier)
        j = int(rng.integers(n_dirs)) if cfg.direction_policy == "random" else cycle % n_dirs
        scale = cfg.misfire_radius_scale if k == misfire_class else 1.0
        if scale != 1.0:
            logger.debug("Misfire-class probe with shrunken radius", extra={"cycle": cycle})
        action = next_probe_action(result.mats, state, sp, j, bounds, scale)
        try:
            out = env.step(action, sp)
        except Exception as exc:
            result.partial = True
            result.fault = f"{type(exc).__name__}: {exc}"
            logger.error("Environment fault during measurement", extra={"cycle": cycle, "error": result.fault})
            break
        safe = is_safe(out, sp, cfg)
        before = int(result.mats.z_lim[k, j])
        applied = float(result.mats.r[k, j]) * scale
        result.mats = measurement_step(result.mats, k, j, safe, cfg, scale)
        if int(result.mats.z_lim[k, j]) > before:
            result.accepted.setdefault((k, j), []).append(applied)
        next_sp = next(schedule)
        next_state = CycleState.from_outputs(out, sp, next_sp)
        row = {
            "cycle": cycle,
            "class_index": k,
            "direction_index": j,
            "radius": applied,
            "safe": int(safe),
            **{f"s_{name}": v for name, v in zip(STATE_FIELDS, state.as_array(), strict=True)},
            "alpha_nvo": action.alpha_nvo,
            "t_inj_g": action.t_inj_g,
            "t_inj_e": action.t_inj_e,
            "alpha50": out.alpha50,
            "q": out.q,
            "pmi": out.pmi,
            "dpmax": out.dpmax,
            "ion_max": out.ion_max,
            "ion_int": out.ion_int,
            "misfire": int(out.misfire),
            "m_g": out.m_g,
            "m_e": out.m_e,
            "pmi_sp_next": next_sp,
        }
        result.rows.append(row)
        if on_cycle is not None:
            on_cycle(row)
        state, sp = next_state, next_sp
        result.cycles = cycle + 1
        if cfg.min_z_per_cell and _all_cells_confident(result.mats, cfg.min_z_per_cell):
            logger.info("Confidence target reached", extra={"cycles": result.cycles})
            break
    result.final_state = state
    return result

