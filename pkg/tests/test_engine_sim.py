"""Engine surrogate: fuel path, calibration, determinism and crank-angle geometry."""

from __future__ import annotations

import numpy as np
import pytest

from engine_lab.core import ActionBounds, ActionVector, CycleOutputs, EngineConstants
from engine_lab.engine_sim import (
    CylinderGeometry,
    EngineSim,
    EngineSimConfig,
    check_safety_structure,
    combustion_cycle,
    crank_grid,
    cylinder_volume,
    fuel_masses,
    imep_from_trace,
    predict_expansion_imep,
)
from engine_lab.error_service import ConfigError, ContractViolation

QUIET = EngineSimConfig().noise_free()


def _settle(sim: EngineSim, action: ActionVector, sp: float, cycles: int = 40) -> CycleOutputs:
    out = sim.step(action, sp)
    for _ in range(cycles - 1):
        out = sim.step(action, sp)
    return out


class TestFuelPath:
    def test_ethanol_jumps_at_minimum_opening(self, constants: EngineConstants) -> None:
        cfg = EngineSimConfig()
        _, below = fuel_masses(ActionVector(190.0, 0.5, 0.079), cfg, constants)
        _, at = fuel_masses(ActionVector(190.0, 0.5, 0.08), cfg, constants)
        assert below == 0.0
        assert at == pytest.approx(cfg.ethanol_step_mg)

    def test_gasoline_dead_time(self, constants: EngineConstants) -> None:
        cfg = EngineSimConfig()
        m_g, _ = fuel_masses(ActionVector(190.0, 0.5, 0.0), cfg, constants)
        assert m_g == pytest.approx(12.0 * 0.4)
        m_g, _ = fuel_masses(ActionVector(190.0, 0.05, 0.0), cfg, constants)
        assert m_g == 0.0


class TestCalibration:
    @pytest.mark.parametrize("sp", [2.0, 3.0, 4.0])
    def test_start_points_track_their_load(self, sp: float, bounds: ActionBounds, constants: EngineConstants) -> None:
        sim = EngineSim(QUIET, bounds, constants)
        out = _settle(sim, bounds.start_point(sp), sp)
        assert not out.misfire
        assert out.pmi == pytest.approx(sp, abs=0.25)
        assert out.dpmax < constants.dpmax_lim
        assert 0.0 < out.alpha50 < 15.0

    def test_both_failure_modes_reachable(self, bounds: ActionBounds, constants: EngineConstants) -> None:
        check_safety_structure(EngineSimConfig(), bounds, constants)

    def test_narrow_bounds_fail_startup_check(self, constants: EngineConstants) -> None:
        narrow = ActionBounds(
            u_min=ActionVector(190.0, 0.4, 0.0),
            u_max=ActionVector(200.0, 0.6, 0.1),
            start_points=((2.0, ActionVector(195.0, 0.5, 0.05)),),
        )
        with pytest.raises(ConfigError):
            check_safety_structure(EngineSimConfig(), narrow, constants)

    def test_short_nvo_misfires(self, bounds: ActionBounds, constants: EngineConstants) -> None:
        sim = EngineSim(QUIET, bounds, constants)
        out = _settle(sim, ActionVector(170.0, 0.3, 0.0), 2.0, cycles=5)
        assert out.misfire
        assert out.q < 50.0

    def test_recovers_after_misfire(self, bounds: ActionBounds, constants: EngineConstants) -> None:
        sim = EngineSim(QUIET, bounds, constants)
        misfire = _settle(sim, ActionVector(170.0, 0.3, 0.0), 2.0, cycles=5)
        assert misfire.misfire
        out = _settle(sim, bounds.start_point(3.0), 3.0, cycles=10)
        assert not out.misfire

    def test_early_phasing_raises_pressure_gradient(self, bounds: ActionBounds, constants: EngineConstants) -> None:
        sim = EngineSim(QUIET, bounds, constants)
        late = _settle(sim, ActionVector(185.0, 0.6, 0.0), 3.0)
        early = _settle(sim, ActionVector(210.0, 0.6, 0.0), 3.0)
        assert early.alpha50 < late.alpha50
        assert early.dpmax > late.dpmax

    def test_more_fuel_means_more_load(self, bounds: ActionBounds, constants: EngineConstants) -> None:
        low = combustion_cycle(ActionVector(195.0, 0.4, 0.0), 700.0, QUIET, constants)[0]
        high = combustion_cycle(ActionVector(195.0, 0.6, 0.0), 700.0, QUIET, constants)[0]
        assert high.q > low.q
        assert high.pmi > low.pmi


class TestSimulator:
    def test_same_seed_same_trajectory(self, bounds: ActionBounds, constants: EngineConstants) -> None:
        a = EngineSim(EngineSimConfig(), bounds, constants, np.random.default_rng(3))
        b = EngineSim(EngineSimConfig(), bounds, constants, np.random.default_rng(3))
        u = bounds.start_point(3.0)
        assert [a.step(u, 3.0) for _ in range(20)] == [b.step(u, 3.0) for _ in range(20)]

    def test_noise_free_is_deterministic(self, bounds: ActionBounds, constants: EngineConstants) -> None:
        sim = EngineSim(QUIET, bounds, constants, np.random.default_rng(1))
        before = sim.rng.bit_generator.state
        u = bounds.start_point(2.5)
        expected, _ = combustion_cycle(u, QUIET.t_exh_init_k, QUIET, constants)
        assert sim.step(u, 2.5) == expected
        assert sim.rng.bit_generator.state == before

    def test_memory_restore(self, bounds: ActionBounds, constants: EngineConstants) -> None:
        sim = EngineSim(EngineSimConfig(), bounds, constants, np.random.default_rng(8))
        u = bounds.start_point(3.5)
        _settle(sim, u, 3.5, cycles=7)
        memory = sim.memory()
        tail = [sim.step(u, 3.5) for _ in range(5)]
        sim.restore(memory)
        assert [sim.step(u, 3.5) for _ in range(5)] == tail

    def test_rejects_out_of_bounds_action(self, bounds: ActionBounds, constants: EngineConstants) -> None:
        sim = EngineSim(QUIET, bounds, constants)
        with pytest.raises(ContractViolation):
            sim.step(ActionVector(215.0, 0.5, 0.1), 3.0)

    def test_noise_free_copy(self) -> None:
        cfg = EngineSimConfig(sigma_alpha50=1.2).noise_free()
        assert cfg.sigma_alpha50 == 0.0 and cfg.sigma_dpmax == 0.0
        assert cfg.alpha50_base == EngineSimConfig().alpha50_base


class TestGeometry:
    geom = CylinderGeometry()

    def test_clearance_and_compression_ratio(self) -> None:
        v_min = cylinder_volume(0.0, self.geom)
        v_max = cylinder_volume(180.0, self.geom)
        assert v_min * 1e6 == pytest.approx(45.3636, abs=1e-3)
        assert v_max / v_min == pytest.approx(12.0)
        assert v_max - v_min == pytest.approx(self.geom.displacement_m3)

    def test_volume_is_symmetric_about_tdc(self) -> None:
        theta = np.linspace(0.0, 180.0, 37)
        assert np.allclose(cylinder_volume(theta, self.geom), cylinder_volume(-theta, self.geom))
        assert np.allclose(cylinder_volume(theta, self.geom), cylinder_volume(360.0 - theta, self.geom))

    def test_volume_grows_during_expansion(self) -> None:
        v = cylinder_volume(crank_grid(0.0, 180.0, 1.0), self.geom)
        assert np.all(np.diff(v) > 0)

    def test_crank_grid_endpoints(self) -> None:
        grid = crank_grid(50.0, 180.0, 0.1)
        assert grid[0] == 50.0 and grid[-1] == 180.0
        assert len(grid) == 1301
        with pytest.raises(ContractViolation):
            crank_grid(180.0, 50.0, 0.1)

    def test_prediction_matches_trace_integral(self) -> None:
        theta = crank_grid(50.0, 180.0, 0.1)
        volume = cylinder_volume(theta, self.geom)
        trace = 20.0 * (volume[0] / volume) ** 1.32
        assert predict_expansion_imep(20.0, self.geom) == pytest.approx(
            imep_from_trace(theta, trace, self.geom), abs=1e-6
        )

    def test_prediction_matches_closed_form(self) -> None:
        kappa = 1.32
        v0 = cylinder_volume(50.0, self.geom)
        v1 = cylinder_volume(180.0, self.geom)
        exact = 20.0 * v0**kappa * (v1 ** (1 - kappa) - v0 ** (1 - kappa)) / (1 - kappa)
        assert predict_expansion_imep(20.0, self.geom) == pytest.approx(exact / self.geom.displacement_m3, rel=1e-5)

    def test_prediction_is_linear_in_pressure(self) -> None:
        assert predict_expansion_imep(0.0, self.geom) == 0.0
        assert predict_expansion_imep(30.0, self.geom) == pytest.approx(1.5 * predict_expansion_imep(20.0, self.geom))

    def test_prediction_rejects_invalid_inputs(self) -> None:
        with pytest.raises(ContractViolation):
            predict_expansion_imep(-1.0, self.geom)
        with pytest.raises(ContractViolation):
            predict_expansion_imep(20.0, self.geom, kappa=1.0)
        with pytest.raises(ContractViolation):
            predict_expansion_imep(20.0, self.geom, kappa=1.8)

    def test_geometry_validation(self) -> None:
        with pytest.raises(ConfigError):
            CylinderGeometry(compression_ratio=1.0)
        with pytest.raises(ConfigError):
            CylinderGeometry(conrod_ratio=0.5)
