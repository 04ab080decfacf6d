"""Stochastic one-cycle-memory HCCI surrogate and crank-angle utilities.

The cycle-to-cycle coupling runs through the exhaust temperature: hot residual
gas trapped by the NVO heats the next charge, which advances phasing, which
raises the pressure rise rate.  A cold residual (after a misfire or at short
NVO) delays or prevents auto-ignition.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .core import (
    M3_PER_CM3,
    M_PER_MM,
    PA_PER_BAR,
    ActionBounds,
    ActionVector,
    CycleOutputs,
    EngineConstants,
    FloatArray,
)
from .error_service import ConfigError, ContractViolation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EngineSimConfig:
    seed: int = 0
    t_intake_k: float = 323.0
    # fuel path
    gasoline_slope: float = 12.0  # mg/ms
    gasoline_dead_time: float = 0.1  # ms
    ethanol_step_mg: float = 1.0
    ethanol_slope: float = 10.0  # mg/ms beyond the minimum opening time
    # residual gas and charge temperature
    residual_base: float = 0.20
    residual_slope: float = 0.008  # per °CA NVO above nvo_ref
    nvo_ref: float = 170.0
    ethanol_cooling_k_per_mg: float = 3.0
    exhaust_base_k: float = 560.0
    exhaust_k_per_j: float = 0.8
    exhaust_k_per_ca: float = 6.0
    t_exh_init_k: float = 750.0
    # phasing law
    alpha50_base: float = 7.0
    alpha50_per_k: float = 0.12
    t_mix_ref_k: float = 480.0
    alpha50_per_j: float = 0.01
    energy_ref_j: float = 250.0
    alpha50_min: float = -10.0
    alpha50_max: float = 40.0
    # misfire and heat release
    misfire_t_mix_k: float = 410.0
    alpha50_late_limit: float = 20.0
    burn_fraction: float = 0.95
    misfire_burn_fraction: float = 0.05
    # indicated efficiency parabola
    eta_peak: float = 0.66
    eta_curvature: float = 0.004
    eta_alpha50_opt: float = 8.0
    # pressure rise rate and ion current
    dp_coeff: float = 0.05
    dp_decay: float = 0.3
    ion_max_coeff: float = 0.01
    ion_decay: float = 0.05
    ion_int_coeff: float = 0.05
    # noise
    sigma_alpha50: float = 0.8
    sigma_dpmax: float = 0.3

    def __post_init__(self) -> None:
        if self.sigma_alpha50 < 0 or self.sigma_dpmax < 0:
            raise ConfigError("engine_sim: noise sigmas must be >= 0")
        if self.gasoline_slope <= 0 or self.ethanol_slope < 0 or self.ethanol_step_mg < 0:
            raise ConfigError("engine_sim: fuel-path constants must be positive")
        if not 0 <= self.misfire_burn_fraction < self.burn_fraction <= 1:
            raise ConfigError("engine_sim: need 0 <= misfire_burn_fraction < burn_fraction <= 1")

    def noise_free(self) -> EngineSimConfig:
        return replace(self, sigma_alpha50=0.0, sigma_dpmax=0.0)


@dataclass(frozen=True)
class CylinderGeometry:
    bore_mm: float = 84.0
    stroke_mm: float = 90.0
    compression_ratio: float = 12.0
    displacement_cm3: float = 499.0
    conrod_ratio: float = 3.5

    def __post_init__(self) -> None:
        if self.compression_ratio <= 1:
            raise ConfigError("geometry.compression_ratio: must exceed 1")
        if self.conrod_ratio <= 1:
            raise ConfigError("geometry.conrod_ratio: must exceed 1")
        if min(self.bore_mm, self.stroke_mm, self.displacement_cm3) <= 0:
            raise ConfigError("geometry: dimensions must be positive")

    @property
    def displacement_m3(self) -> float:
        return self.displacement_cm3 * M3_PER_CM3

    @property
    def clearance_m3(self) -> float:
        return self.displacement_m3 / (self.compression_ratio - 1.0)


# ---------------------------------------------------------------------------
# Fuel path and the one-cycle combustion model
# ---------------------------------------------------------------------------


def fuel_masses(action: ActionVector, cfg: EngineSimConfig, constants: EngineConstants) -> tuple[float, float]:
    """Injected gasoline and ethanol mass in mg; ethanol jumps at its minimum opening time."""
    m_g = cfg.gasoline_slope * max(action.t_inj_g - cfg.gasoline_dead_time, 0.0)
    if action.t_inj_e < constants.t_e_min_open:
        m_e = 0.0
    else:
        m_e = cfg.ethanol_step_mg + cfg.ethanol_slope * (action.t_inj_e - constants.t_e_min_open)
    return m_g, m_e


def pressure_rise_rate(q: float, alpha50: float, cfg: EngineSimConfig) -> float:
    """Noise-free dp_max in bar/°CA: ``c·Q·exp(-k·α50)``."""
    return cfg.dp_coeff * q * math.exp(-cfg.dp_decay * alpha50)


def indicated_efficiency(alpha50: float, cfg: EngineSimConfig) -> float:
    return max(cfg.eta_peak - cfg.eta_curvature * (alpha50 - cfg.eta_alpha50_opt) ** 2, 0.0)


def combustion_cycle(
    action: ActionVector,
    t_exh_prev: float,
    cfg: EngineSimConfig,
    constants: EngineConstants,
    noise_alpha50: float = 0.0,
    noise_dpmax: float = 0.0,
) -> tuple[CycleOutputs, float]:
    """One cycle of the surrogate; returns outputs and the new exhaust temperature."""
    m_g, m_e = fuel_masses(action, cfg, constants)
    energy = m_g * constants.lcv_g + m_e * constants.lcv_e
    x_r = min(max(cfg.residual_base + cfg.residual_slope * (action.alpha_nvo - cfg.nvo_ref), 0.0), 0.95)
    t_mix = (1.0 - x_r) * cfg.t_intake_k + x_r * t_exh_prev - cfg.ethanol_cooling_k_per_mg * m_e
    alpha50 = (
        cfg.alpha50_base
        - cfg.alpha50_per_k * (t_mix - cfg.t_mix_ref_k)
        - cfg.alpha50_per_j * (energy - cfg.energy_ref_j)
        + noise_alpha50
    )
    alpha50 = min(max(alpha50, cfg.alpha50_min), cfg.alpha50_max)
    misfire = t_mix < cfg.misfire_t_mix_k or alpha50 > cfg.alpha50_late_limit
    q = (cfg.misfire_burn_fraction if misfire else cfg.burn_fraction) * energy
    work = indicated_efficiency(alpha50, cfg) * q
    pmi = work / (PA_PER_BAR * constants.displacement_m3)
    dpmax = max(pressure_rise_rate(q, alpha50, cfg) + noise_dpmax, 0.0)
    ion_max = cfg.ion_max_coeff * q * math.exp(-cfg.ion_decay * (alpha50 - cfg.eta_alpha50_opt))
    ion_int = cfg.ion_int_coeff * q
    t_exh = cfg.exhaust_base_k + cfg.exhaust_k_per_j * q + cfg.exhaust_k_per_ca * (alpha50 - cfg.eta_alpha50_opt)
    out = CycleOutputs(
        alpha50=alpha50,
        q=q,
        pmi=pmi,
        dpmax=dpmax,
        ion_max=max(ion_max, 0.0),
        ion_int=max(ion_int, 0.0),
        misfire=misfire,
        m_g=m_g,
        m_e=m_e,
    )
    return out, t_exh


class EngineSim:
    """Stateful surrogate: the only memory is the previous exhaust temperature."""

    def __init__(
        self,
        cfg: EngineSimConfig,
        bounds: ActionBounds,
        constants: EngineConstants,
        rng: np.random.Generator | None = None,
    ) -> None:
        self.cfg = cfg
        self.bounds = bounds
        self.constants = constants
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.t_exh_prev = cfg.t_exh_init_k

    def step(self, action: ActionVector, pmi_sp: float) -> CycleOutputs:
        if not self.bounds.contains(action):
            raise ContractViolation(f"action outside bounds: {action}")
        noise_a = self.rng.normal(0.0, self.cfg.sigma_alpha50) if self.cfg.sigma_alpha50 > 0 else 0.0
        noise_dp = self.rng.normal(0.0, self.cfg.sigma_dpmax) if self.cfg.sigma_dpmax > 0 else 0.0
        out, self.t_exh_prev = combustion_cycle(
            action, self.t_exh_prev, self.cfg, self.constants, noise_a, noise_dp
        )
        return out

    def memory(self) -> dict[str, Any]:
        return {"t_exh_prev": self.t_exh_prev, "rng": self.rng.bit_generator.state}

    def restore(self, memory: dict[str, Any]) -> None:
        self.t_exh_prev = float(memory["t_exh_prev"])
        self.rng.bit_generator.state = memory["rng"]


def check_safety_structure(
    cfg: EngineSimConfig, bounds: ActionBounds, constants: EngineConstants, points: int = 5
) -> None:
    """Grid-scan the bounds from the initial memory; both failure modes must be reachable."""
    axes = [np.linspace(lo, hi, points) for lo, hi in zip(bounds.lower, bounds.upper, strict=True)]
    too_steep = misfires = False
    for a, g, e in np.array(np.meshgrid(*axes, indexing="ij")).reshape(3, -1).T:
        out, _ = combustion_cycle(ActionVector(a, g, e), cfg.t_exh_init_k, cfg.noise_free(), constants)
        too_steep |= out.dpmax > constants.dpmax_lim
        misfires |= out.misfire
    if not (too_steep and misfires):
        raise ConfigError(
            "engine_sim: bounds must contain both dp_max violations and misfires "
            f"(dp violation reachable={too_steep}, misfire reachable={misfires})"
        )


# ---------------------------------------------------------------------------
# Crank-slider geometry and isentropic IMEP prediction
# ---------------------------------------------------------------------------


def cylinder_volume(theta: float | FloatArray, geom: CylinderGeometry) -> Any:
    """Cylinder volume in m³ at crank angle *theta* (°CA, 0 = firing TDC)."""
    rad = np.deg2rad(theta)
    a = geom.stroke_mm * M_PER_MM / 2.0
    rod = geom.conrod_ratio * a
    travel = a + rod - a * np.cos(rad) - np.sqrt(rod**2 - (a * np.sin(rad)) ** 2)
    return geom.clearance_m3 + geom.displacement_m3 * travel / (2.0 * a)


def crank_grid(theta_from: float, theta_to: float, step: float) -> FloatArray:
    if step <= 0 or theta_to <= theta_from:
        raise ContractViolation("crank grid needs step > 0 and theta_to > theta_from")
    n = math.ceil((theta_to - theta_from) / step - 1e-9)
    return np.linspace(theta_from, theta_to, n + 1)


def imep_from_trace(theta: FloatArray, pressure_bar: FloatArray, geom: CylinderGeometry) -> float:
    """(1/V_H)·∫p dV by trapezoid over a sampled trace, in bar."""
    volume = cylinder_volume(theta, geom)
    return float(np.trapz(pressure_bar, volume) / geom.displacement_m3)


def predict_expansion_imep(
    p50: float,
    geom: CylinderGeometry,
    theta_from: float = 50.0,
    kappa: float = 1.32,
    theta_to: float = 180.0,
    step: float = 0.1,
) -> float:
    """Expansion-stroke IMEP share assuming isentropic expansion from ``p50`` at *theta_from*."""
    if p50 < 0:
        raise ContractViolation("p50 must be non-negative")
    if not 1.0 < kappa <= 1.7:
        raise ContractViolation(f"kappa must lie in (1, 1.7], got {kappa}")
    theta = crank_grid(theta_from, theta_to, step)
    volume = cylinder_volume(theta, geom)
    pressure = p50 * (volume[0] / volume) ** kappa
    return float(np.trapz(pressure, volume) / geom.displacement_m3)
