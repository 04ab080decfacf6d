"""Domain types and action-space geometry shared by every other module.

Units follow the engine-testbench conventions: crank angle in °CA, energies in
J, pressures in bar, injection durations in ms.  All types are immutable
values; numpy arrays stored on them are flagged read-only.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import numpy.typing as npt

from .error_service import ConfigError, ContractViolation

FloatArray = npt.NDArray[np.float64]

STATE_FIELDS: tuple[str, ...] = (
    "alpha50_prev",
    "q_prev",
    "pmi_prev",
    "dpmax_prev",
    "ion_max_prev",
    "ion_int_prev",
    "pmi_sp_prev",
    "pmi_sp",
)
ACTION_FIELDS: tuple[str, ...] = ("alpha_nvo", "t_inj_g", "t_inj_e")

# Relative slack when checking an action against its bounds; denormalized
# actions may land one ulp outside.
_BOUNDS_SLACK = 1e-9


def _frozen(arr: npt.ArrayLike) -> FloatArray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# State and action values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CycleState:
    """Observation for one combustion cycle (previous-cycle features + setpoints)."""

    alpha50_prev: float
    q_prev: float
    pmi_prev: float
    dpmax_prev: float
    ion_max_prev: float
    ion_int_prev: float
    pmi_sp_prev: float
    pmi_sp: float

    def __post_init__(self) -> None:
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise ContractViolation(f"non-finite cycle state: {values.tolist()}")
        if self.ion_max_prev < 0 or self.ion_int_prev < 0:
            raise ContractViolation("ion features must be non-negative")

    def as_array(self) -> FloatArray:
        return np.array([getattr(self, name) for name in STATE_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, values: npt.ArrayLike) -> CycleState:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.shape != (len(STATE_FIELDS),):
            raise ContractViolation(f"cycle state needs 8 components, got {arr.shape}")
        return cls(*(float(v) for v in arr))

    @classmethod
    def from_outputs(
        cls, out: CycleOutputs, pmi_sp_prev: float, pmi_sp: float
    ) -> CycleState:
        """State seen by the next cycle after *out* was produced at ``pmi_sp_prev``."""
        return cls(
            alpha50_prev=out.alpha50,
            q_prev=out.q,
            pmi_prev=out.pmi,
            dpmax_prev=out.dpmax,
            ion_max_prev=out.ion_max,
            ion_int_prev=out.ion_int,
            pmi_sp_prev=pmi_sp_prev,
            pmi_sp=pmi_sp,
        )

    def setpoints_within(self, low: float, high: float) -> bool:
        return low <= self.pmi_sp_prev <= high and low <= self.pmi_sp <= high


@dataclass(frozen=True)
class ActionVector:
    """Physical actuator commands: NVO duration, gasoline and ethanol injection."""

    alpha_nvo: float
    t_inj_g: float
    t_inj_e: float

    def as_array(self) -> FloatArray:
        return np.array([self.alpha_nvo, self.t_inj_g, self.t_inj_e], dtype=np.float64)

    @classmethod
    def from_array(cls, values: npt.ArrayLike) -> ActionVector:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.shape != (3,):
            raise ContractViolation(f"action needs 3 components, got {arr.shape}")
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class RawAction:
    """Unbounded pre-tanh actor output."""

    values: tuple[float, float, float]

    def __post_init__(self) -> None:
        if len(self.values) != 3 or not all(math.isfinite(v) for v in self.values):
            raise ContractViolation(f"raw action must be 3 finite values: {self.values}")

    def as_array(self) -> FloatArray:
        return np.array(self.values, dtype=np.float64)

    @classmethod
    def from_array(cls, values: npt.ArrayLike) -> RawAction:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.shape != (3,):
            raise ContractViolation(f"raw action needs 3 components, got {arr.shape}")
        return cls((float(arr[0]), float(arr[1]), float(arr[2])))


@dataclass(frozen=True)
class CycleOutputs:
    """What one combustion cycle produced, including the fuel actually injected."""

    alpha50: float
    q: float
    pmi: float
    dpmax: float
    ion_max: float
    ion_int: float
    misfire: bool
    m_g: float = 0.0
    m_e: float = 0.0


class CycleEnvironment(Protocol):
    """Anything that turns one action into one combustion cycle."""

    def step(self, action: ActionVector, pmi_sp: float) -> CycleOutputs: ...


# ---------------------------------------------------------------------------
# Configuration values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionBounds:
    """Actuator bounds plus the load-indexed table of safe start points."""

    u_min: ActionVector = ActionVector(170.0, 0.25, 0.0)
    u_max: ActionVector = ActionVector(210.0, 1.0, 0.4)
    start_points: tuple[tuple[float, ActionVector], ...] = field(
        default_factory=lambda: tuple(
            (s, ActionVector(200.0 - 6.0 * (s - 2.0), 0.40 + 0.14 * (s - 2.0), 0.04 + 0.03 * (s - 2.0)))
            for s in (2.0, 2.5, 3.0, 3.5, 4.0)
        )
    )

    def __post_init__(self) -> None:
        lo, hi = self.lower, self.upper
        if not np.all(lo < hi):
            raise ConfigError(f"bounds: u_min must be below u_max ({lo} vs {hi})")
        if not self.start_points:
            raise ConfigError("start_points: table must not be empty")
        keys = [s for s, _ in self.start_points]
        if any(b <= a for a, b in itertools.pairwise(keys)):
            raise ConfigError(f"start_points: setpoints must be strictly increasing {keys}")
        for s, u in self.start_points:
            arr = u.as_array()
            if not np.all((arr > lo) & (arr < hi)):
                raise ConfigError(f"start_points: entry for {s} bar is not strictly inside bounds")

    @property
    def lower(self) -> FloatArray:
        return self.u_min.as_array()

    @property
    def upper(self) -> FloatArray:
        return self.u_max.as_array()

    @property
    def setpoint_range(self) -> tuple[float, float]:
        return self.start_points[0][0], self.start_points[-1][0]

    def start_point(self, setpoint: float) -> ActionVector:
        """Piecewise-linear start point for *setpoint*, clamped outside the table."""
        keys = np.array([s for s, _ in self.start_points], dtype=np.float64)
        table = np.array([u.as_array() for _, u in self.start_points])
        return ActionVector.from_array(
            [np.interp(setpoint, keys, table[:, j]) for j in range(3)]
        )

    def contains(self, u: ActionVector) -> bool:
        arr = u.as_array()
        slack = _BOUNDS_SLACK * (self.upper - self.lower)
        return bool(np.all(arr >= self.lower - slack) and np.all(arr <= self.upper + slack))


@dataclass(frozen=True)
class ClassifierConfig:
    """α50 bins ``(e_i, e_{i+1}]`` plus underflow, overflow and misfire classes.

    Class indices: 0 underflow (α50 ≤ first edge), 1..n_bins the bins,
    n_bins+1 overflow, n_bins+2 misfire.
    """

    edges: tuple[float, ...] = tuple(float(e) for e in range(-6, 22, 3))
    misfire_q_threshold: float = 50.0

    def __post_init__(self) -> None:
        if len(self.edges) < 2:
            raise ConfigError("classifier.edges: need at least two edges")
        if any(b <= a for a, b in itertools.pairwise(self.edges)):
            raise ConfigError(f"classifier.edges: must be strictly increasing {self.edges}")

    @classmethod
    def uniform(cls, low: float, high: float, width: float, misfire_q_threshold: float = 50.0) -> ClassifierConfig:
        if width <= 0 or high <= low:
            raise ConfigError("classifier: need width > 0 and high > low")
        count = round((high - low) / width)
        return cls(tuple(float(low + i * width) for i in range(count + 1)), misfire_q_threshold)

    @property
    def n_classes(self) -> int:
        return len(self.edges) + 2

    @property
    def misfire_class(self) -> int:
        return len(self.edges) + 1

    def label(self, k: int) -> str:
        if k == 0:
            return f"alpha50<={self.edges[0]:g}"
        if k == self.misfire_class:
            return "misfire"
        if k == len(self.edges):
            return f"alpha50>{self.edges[-1]:g}"
        return f"({self.edges[k - 1]:g},{self.edges[k]:g}]"


def classify_state(state: CycleState, cfg: ClassifierConfig) -> int:
    """Class index of the previous cycle; non-finite phasing counts as misfire."""
    if state.q_prev < cfg.misfire_q_threshold or not math.isfinite(state.alpha50_prev):
        return cfg.misfire_class
    return int(np.searchsorted(np.asarray(cfg.edges), state.alpha50_prev, side="left"))


@dataclass(frozen=True, eq=False)
class DirectionSet:
    """Unit direction vectors in normalized action space, one row each."""

    vectors: FloatArray

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ConfigError(f"directions: expected an (L, 3) array, got {v.shape}")
        if v.shape[0] < 2:
            raise ConfigError("directions: need at least two directions")
        norms = np.linalg.norm(v, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ConfigError("directions: every vector must have unit length")
        gaps = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)
        np.fill_diagonal(gaps, np.inf)
        if np.any(gaps < 1e-9):
            raise ConfigError("directions: duplicate direction vectors")
        object.__setattr__(self, "vectors", _frozen(v))

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @classmethod
    def from_vectors(cls, vectors: Sequence[Sequence[float]]) -> DirectionSet:
        """Normalize arbitrary nonzero vectors to unit length."""
        v = np.asarray(vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ConfigError(f"directions: expected 3-vectors, got shape {v.shape}")
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ConfigError("directions: zero vector is not a direction")
        # rows that are already unit length stay bit-identical across save and reload
        norms[np.abs(norms - 1.0) <= 1e-12] = 1.0
        return cls(v / norms)


def default_direction_set(count: int = 26) -> DirectionSet:
    """All 26 nonzero sign vectors of {-1, 0, 1}³, normalized."""
    if count < 2:
        raise ContractViolation(f"direction count must be >= 2, got {count}")
    if count != 26:
        raise ContractViolation("only the 26-vector default exists; pass explicit vectors otherwise")
    signs = [v for v in itertools.product((-1.0, 0.0, 1.0), repeat=3) if any(v)]
    return DirectionSet.from_vectors(signs)


PA_PER_BAR = 1e5
M3_PER_L = 1e-3
M3_PER_CM3 = 1e-6
M_PER_MM = 1e-3


@dataclass(frozen=True)
class EngineConstants:
    displacement_l: float = 0.5
    lcv_g: float = 44.3
    lcv_e: float = 26.8
    dpmax_lim: float = 5.0
    misfire_tolerance: float = 0.3
    t_e_min_open: float = 0.08

    def __post_init__(self) -> None:
        for name in ("displacement_l", "lcv_g", "lcv_e", "dpmax_lim", "misfire_tolerance", "t_e_min_open"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"engine_constants.{name}: must be strictly positive")

    @property
    def displacement_m3(self) -> float:
        return self.displacement_l * M3_PER_L


@dataclass(frozen=True)
class StateRanges:
    """Per-component min/max used to scale a CycleState into [-1, 1]."""

    low: tuple[float, ...] = (-10.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.5, 1.5)
    high: tuple[float, ...] = (30.0, 600.0, 6.0, 15.0, 8.0, 40.0, 4.5, 4.5)

    def __post_init__(self) -> None:
        if len(self.low) != 8 or len(self.high) != 8:
            raise ConfigError("state_ranges: low and high need 8 entries each")
        if any(h <= lo for lo, h in zip(self.low, self.high, strict=True)):
            raise ConfigError("state_ranges: every high must exceed its low")


def normalize_state(states: npt.ArrayLike, ranges: StateRanges) -> FloatArray:
    """Min-max scale raw state rows into [-1, 1] (clipped)."""
    x = np.asarray(states, dtype=np.float64)
    lo = np.asarray(ranges.low)
    hi = np.asarray(ranges.high)
    return np.clip(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Action-space geometry
# ---------------------------------------------------------------------------


def normalize_action(u: ActionVector, u_start: ActionVector, bounds: ActionBounds) -> FloatArray:
    """Piecewise-linear map of *u* into [-1, 1]³ with *u_start* at the origin."""
    if not bounds.contains(u):
        raise ContractViolation(f"action outside bounds: {u}")
    x, s = u.as_array(), u_start.as_array()
    lo, hi = bounds.lower, bounds.upper
    if not np.all((s > lo) & (s < hi)):
        raise ContractViolation(f"start point not strictly inside bounds: {u_start}")
    out = np.where(x >= s, (x - s) / (hi - s), -(x - s) / (lo - s))
    return np.clip(out, -1.0, 1.0)


def denormalize_action(u_norm: npt.ArrayLike, u_start: ActionVector, bounds: ActionBounds) -> ActionVector:
    """Inverse of :func:`normalize_action`."""
    n = np.asarray(u_norm, dtype=np.float64).reshape(-1)
    if n.shape != (3,) or not np.all(np.isfinite(n)):
        raise ContractViolation(f"normalized action must be 3 finite values: {n}")
    if np.any(np.abs(n) > 1.0):
        raise ContractViolation(f"normalized action outside [-1, 1]: {n}")
    s = u_start.as_array()
    lo, hi = bounds.lower, bounds.upper
    out = np.where(n >= 0, s + n * (hi - s), s + n * (s - lo))
    return ActionVector.from_array(np.clip(out, lo, hi))
