"""JSON configuration: defaults, section-wise merge, validation and hashing.

A config file is a JSON object whose top-level keys are section names; each
section overrides only the keys it names.  Everything is validated by the
``__post_init__`` of the section's dataclass and reported as
:class:`~engine_lab.error_service.ConfigError` with the offending key path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, TypeVar

import numpy as np

from .core import (
    ActionBounds,
    ActionVector,
    ClassifierConfig,
    DirectionSet,
    EngineConstants,
    StateRanges,
    default_direction_set,
)
from .ddpg import AgentHyperParams
from .engine_sim import CylinderGeometry, EngineSimConfig
from .error_service import ConfigError
from .measurement import MeasurementConfig
from .reward import COMPONENTS, RewardParams, RewardRow
from .safety import SafetyConfig
from .udp_link import UdpConfig

T = TypeVar("T")

# Sections whose content decides whether saved limitation matrices still apply.
MATRIX_SECTIONS: tuple[str, ...] = ("classifier", "bounds", "directions")
# Sections a checkpoint's networks depend on.
AGENT_SECTIONS: tuple[str, ...] = ("agent", "state_ranges", "bounds")


@dataclass(frozen=True)
class EpisodePlan:
    cycles_per_episode: int = 1000
    setpoints: tuple[float, ...] = (2.0, 2.5, 3.0, 3.5, 4.0)
    dwell_min: int = 20
    dwell_max: int = 100
    validation_every: int = 10
    validation_dwell: int = 100
    validation_cycles: int = 1000
    train_episodes: int = 60
    adapt_episodes: int = 120
    adapt_sigma: float = 0.3
    measure_cycles: int = 20_000
    warmup_cycles: int = 5
    offline_batches: int = 0
    initial_validation: bool = True

    def __post_init__(self) -> None:
        if self.cycles_per_episode < 1 or self.validation_cycles < 1:
            raise ConfigError("plan: episode lengths must be >= 1")
        if not self.setpoints:
            raise ConfigError("plan.setpoints: need at least one setpoint")
        if not 1 <= self.dwell_min <= self.dwell_max:
            raise ConfigError("plan: need 1 <= dwell_min <= dwell_max")
        if self.validation_dwell < 1:
            raise ConfigError("plan.validation_dwell: must be >= 1")
        if self.validation_every < 0 or self.train_episodes < 0 or self.adapt_episodes < 0:
            raise ConfigError("plan: episode counts must be >= 0")
        if self.adapt_sigma < 0:
            raise ConfigError("plan.adapt_sigma: must be >= 0")
        if self.measure_cycles < 0 or self.offline_batches < 0:
            raise ConfigError("plan: cycle and batch counts must be >= 0")
        if self.warmup_cycles < 1:
            raise ConfigError("plan.warmup_cycles: need at least one cycle to observe a state")


@dataclass(frozen=True)
class LabConfig:
    bounds: ActionBounds = field(default_factory=ActionBounds)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    directions: DirectionSet = field(default_factory=default_direction_set)
    engine_constants: EngineConstants = field(default_factory=EngineConstants)
    state_ranges: StateRanges = field(default_factory=StateRanges)
    agent: AgentHyperParams = field(default_factory=AgentHyperParams)
    reward: RewardParams = field(default_factory=RewardParams)
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    measurement: MeasurementConfig = field(default_factory=MeasurementConfig)
    engine_sim: EngineSimConfig = field(default_factory=EngineSimConfig)
    geometry: CylinderGeometry = field(default_factory=CylinderGeometry)
    plan: EpisodePlan = field(default_factory=EpisodePlan)
    udp: UdpConfig = field(default_factory=UdpConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        lim = self.engine_constants.dpmax_lim
        tol = self.engine_constants.misfire_tolerance
        for name, section in (("safety", self.safety), ("measurement", self.measurement)):
            if section.dpmax_lim != lim or section.misfire_tolerance != tol:
                raise ConfigError(
                    f"{name}: dpmax_lim/misfire_tolerance must match engine_constants ({lim}, {tol})"
                )
        if self.safety.n_neighbors > len(self.directions):
            raise ConfigError("safety.n_neighbors: exceeds the number of directions")
        low, high = self.bounds.setpoint_range
        if any(not low <= sp <= high for sp in self.plan.setpoints):
            raise ConfigError(f"plan.setpoints: must lie within the start-point table [{low}, {high}]")
        if self.seed < 0:
            raise ConfigError("seed: must be >= 0")

    def with_overrides(self, *, seed: int | None = None, deterministic: bool = False) -> LabConfig:
        cfg = self if seed is None else replace(self, seed=seed)
        if deterministic:
            cfg = replace(cfg, engine_sim=cfg.engine_sim.noise_free())
        return cfg


def default_config() -> LabConfig:
    return LabConfig()


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _tuples(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def _merge(default: T, section: str, data: Any) -> T:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a JSON object")
    known = {f.name for f in fields(default)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    try:
        return replace(default, **{k: _tuples(v) for k, v in data.items()})  # type: ignore[type-var]
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: invalid value ({exc})") from exc


def _action(value: Any, key: str) -> ActionVector:
    if isinstance(value, dict):
        value = [value.get(n) for n in ("alpha_nvo", "t_inj_g", "t_inj_e")]
    if not isinstance(value, list) or len(value) != 3 or not all(isinstance(v, int | float) for v in value):
        raise ConfigError(f"{key}: expected [alpha_nvo, t_inj_g, t_inj_e]")
    return ActionVector(*(float(v) for v in value))


def _bounds(data: Any) -> ActionBounds:
    if not isinstance(data, dict):
        raise ConfigError("bounds: expected a JSON object")
    unknown = sorted(set(data) - {"u_min", "u_max", "start_points"})
    if unknown:
        raise ConfigError(f"bounds: unknown keys {unknown}")
    base = ActionBounds()
    u_min = _action(data["u_min"], "bounds.u_min") if "u_min" in data else base.u_min
    u_max = _action(data["u_max"], "bounds.u_max") if "u_max" in data else base.u_max
    table = base.start_points
    if "start_points" in data:
        try:
            table = tuple(
                (float(sp), _action(u, f"bounds.start_points[{i}]"))
                for i, (sp, u) in enumerate(data["start_points"])
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError("bounds.start_points: expected [[setpoint, [a, g, e]], ...]") from exc
    return ActionBounds(u_min, u_max, table)


def _directions(data: Any) -> DirectionSet:
    if data is None or data == "default":
        return default_direction_set()
    try:
        return DirectionSet.from_vectors(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"directions: expected a list of 3-vectors ({exc})") from exc


def _reward(data: Any) -> RewardParams:
    if not isinstance(data, dict):
        raise ConfigError("reward: expected a JSON object")
    base = RewardParams()
    rows = dict(base.rows)
    for name, coeffs in data.get("rows", {}).items():
        if name not in COMPONENTS:
            raise ConfigError(f"reward.rows: unknown component {name!r}")
        if not isinstance(coeffs, list) or len(coeffs) != 5:
            raise ConfigError(f"reward.rows.{name}: expected [c1, c2, c3, c4, c5]")
        rows[name] = RewardRow(*(float(c) for c in coeffs))
    enabled = {**base.enabled, **data.get("enabled", {})}
    rest = {k: v for k, v in data.items() if k not in ("rows", "enabled")}
    return _merge(RewardParams(rows, enabled), "reward", rest)


_SECTION_DEFAULTS: dict[str, Any] = {
    "classifier": ClassifierConfig(),
    "engine_constants": EngineConstants(),
    "state_ranges": StateRanges(),
    "agent": AgentHyperParams(),
    "safety": SafetyConfig(),
    "measurement": MeasurementConfig(),
    "engine_sim": EngineSimConfig(),
    "geometry": CylinderGeometry(),
    "plan": EpisodePlan(),
    "udp": UdpConfig(),
}


def config_from_dict(data: dict[str, Any]) -> LabConfig:
    sections: dict[str, Any] = {}
    for key, value in data.items():
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("seed: expected an integer")
            sections[key] = value
        elif key == "bounds":
            sections[key] = _bounds(value)
        elif key == "directions":
            sections[key] = _directions(value)
        elif key == "reward":
            sections[key] = _reward(value)
        elif key in _SECTION_DEFAULTS:
            sections[key] = _merge(_SECTION_DEFAULTS[key], key, value)
        else:
            raise ConfigError(f"unknown config section {key!r}")
    return LabConfig(**sections)


def load_config(path: Path | str | None) -> LabConfig:
    """Defaults when *path* is None, else the file merged over the defaults."""
    if path is None:
        return default_config()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Canonical form and hashing
# ---------------------------------------------------------------------------


def _plain(obj: Any) -> Any:
    if isinstance(obj, DirectionSet):
        return obj.vectors.tolist()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, list | tuple):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: LabConfig) -> dict[str, Any]:
    out: dict[str, Any] = _plain(cfg)
    out["bounds"]["start_points"] = [
        [sp, [u.alpha_nvo, u.t_inj_g, u.t_inj_e]] for sp, u in cfg.bounds.start_points
    ]
    out["bounds"]["u_min"] = cfg.bounds.u_min.as_array().tolist()
    out["bounds"]["u_max"] = cfg.bounds.u_max.as_array().tolist()
    out["reward"]["rows"] = {
        name: [row.c1, row.c2, row.c3, row.c4, row.c5] for name, row in cfg.reward.rows.items()
    }
    return out


def config_hash(cfg: LabConfig, sections: tuple[str, ...] | None = None) -> str:
    """SHA-256 over the canonical JSON of *sections* (all sections when None)."""
    full = config_to_dict(cfg)
    chosen = full if sections is None else {s: full[s] for s in sections}
    blob = json.dumps(chosen, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
