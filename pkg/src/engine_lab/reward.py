"""Clamped-tanh multi-objective reward.

Every component is ``min(tanh(C1·f + C2)·C3 + C4·f + C5, 0)`` applied to its
own metric ``f``; the total is the sum of the enabled components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

from .core import PA_PER_BAR, CycleOutputs, EngineConstants
from .error_service import ConfigError, ContractViolation

COMPONENTS: tuple[str, ...] = (
    "load",
    "stability",
    "pressure_gradient",
    "safety",
    "efficiency",
    "ethanol",
)

EfficiencySign = Literal["corrected", "verbatim"]


@dataclass(frozen=True)
class RewardRow:
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float

    def __call__(self, f: float) -> float:
        return reward_term(f, self)


def reward_term(f: float, row: RewardRow) -> float:
    return min(math.tanh(row.c1 * f + row.c2) * row.c3 + row.c4 * f + row.c5, 0.0)


def _default_rows() -> dict[str, RewardRow]:
    return {
        "load": RewardRow(3.0, 0.0, -1.5, -0.1, 0.0),
        "stability": RewardRow(0.015, 0.0, -0.5, -5e-4, 0.0),
        "pressure_gradient": RewardRow(20.0, -2.0, -0.25, -1.0, -0.241),
        "safety": RewardRow(-7.0, -2.0, -0.25, 0.4, -0.241),
        "efficiency": RewardRow(0.0, 0.0, 0.0, -5e-3, -0.2),
        "ethanol": RewardRow(100.0, 0.0, -0.75, -10.0, 0.0),
    }


def _default_enabled() -> dict[str, bool]:
    return {name: name != "ethanol" for name in COMPONENTS}


@dataclass(frozen=True)
class RewardParams:
    rows: dict[str, RewardRow] = field(default_factory=_default_rows)
    enabled: dict[str, bool] = field(default_factory=_default_enabled)
    x_eth_sp: float = 0.5
    efficiency_sign: EfficiencySign = "corrected"

    def __post_init__(self) -> None:
        if set(self.rows) != set(COMPONENTS):
            raise ConfigError(f"reward.rows: need exactly {COMPONENTS}")
        if set(self.enabled) - set(COMPONENTS):
            raise ConfigError(f"reward.enabled: unknown components {set(self.enabled) - set(COMPONENTS)}")
        if not 0.0 <= self.x_eth_sp <= 1.0:
            raise ConfigError("reward.x_eth_sp: must lie in [0, 1]")
        if self.efficiency_sign not in ("corrected", "verbatim"):
            raise ConfigError(f"reward.efficiency_sign: unknown value {self.efficiency_sign!r}")

    def is_enabled(self, name: str) -> bool:
        return self.enabled.get(name, False)

    def with_enabled(self, **flags: bool) -> RewardParams:
        return RewardParams(self.rows, {**self.enabled, **flags}, self.x_eth_sp, self.efficiency_sign)


def _fuel_energy(m_g: float, m_e: float, constants: EngineConstants) -> float:
    return m_g * constants.lcv_g + m_e * constants.lcv_e


def efficiency(pmi: float, m_g: float, m_e: float, constants: EngineConstants) -> float:
    """Indicated efficiency; 1 bar·L = 100 J and 1 mg·MJ/kg = 1 J."""
    energy = _fuel_energy(m_g, m_e, constants)
    if energy <= 0:
        raise ContractViolation("efficiency is undefined without injected fuel")
    work = pmi * PA_PER_BAR * constants.displacement_m3
    return work / energy


def ethanol_energy_share(m_g: float, m_e: float, constants: EngineConstants) -> float:
    energy = _fuel_energy(m_g, m_e, constants)
    if energy <= 0:
        raise ContractViolation("ethanol share is undefined without injected fuel")
    return m_e * constants.lcv_e / energy


@dataclass(frozen=True)
class RewardBreakdown:
    metrics: dict[str, float]
    terms: dict[str, float]
    total: float
    eta: float
    x_eth: float

    def as_row(self) -> dict[str, float]:
        row = {f"f_{k}": v for k, v in self.metrics.items()}
        row.update({f"r_{k}": v for k, v in self.terms.items()})
        row["reward"] = self.total
        return row


def total_reward(
    out: CycleOutputs,
    pmi_sp: float,
    alpha50_prev: float,
    delta_r_sf: float,
    params: RewardParams,
    constants: EngineConstants,
) -> RewardBreakdown:
    """Evaluate every component; disabled ones contribute exactly 0."""
    energy = _fuel_energy(out.m_g, out.m_e, constants)
    eta = 0.0 if out.misfire or energy <= 0 else efficiency(out.pmi, out.m_g, out.m_e, constants)
    x_eth = ethanol_energy_share(out.m_g, out.m_e, constants) if energy > 0 else 0.0
    metrics = {
        "load": (out.pmi - pmi_sp) ** 2,
        "stability": (out.alpha50 - alpha50_prev) ** 2,
        "pressure_gradient": out.dpmax - constants.dpmax_lim,
        "safety": min(delta_r_sf, 0.0),
        "efficiency": -eta if params.efficiency_sign == "corrected" else eta,
        "ethanol": (x_eth - params.x_eth_sp) ** 2,
    }
    terms = {
        name: reward_term(metrics[name], params.rows[name]) if params.is_enabled(name) else 0.0
        for name in COMPONENTS
    }
    total = 0.0
    for name in COMPONENTS:
        total += terms[name]
    return RewardBreakdown(metrics=metrics, terms=terms, total=total, eta=eta, x_eth=x_eth)
