"""k-nearest-neighbor safety monitor over learned limitation matrices.

The monitor maps the raw actor output into physical bounds, expresses it in
normalized coordinates around the load-dependent start point, and projects it
radially back onto the safe radius interpolated from the neighboring
directions of the current state class.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
import pandas as pd

from .core import (
    ActionBounds,
    ActionVector,
    ClassifierConfig,
    CycleState,
    DirectionSet,
    FloatArray,
    RawAction,
    classify_state,
    denormalize_action,
    normalize_action,
)
from .error_service import ConfigError, ContractViolation, SafetyPreconditionError

logger = logging.getLogger(__name__)

MATRIX_COLUMNS = ("class_index", "direction_index", "v_x", "v_y", "v_z", "r", "r_lim", "z_lim", "o")
SIDECAR_VERSION = 1
_DEGENERATE = 1e-12


@dataclass(frozen=True)
class SafetyConfig:
    delta_r_tol: float = 0.15
    n_neighbors: int = 3
    dpmax_lim: float = 5.0
    misfire_tolerance: float = 0.3

    def __post_init__(self) -> None:
        if self.delta_r_tol < 0:
            raise ConfigError("safety.delta_r_tol: must be >= 0")
        if self.n_neighbors < 1:
            raise ConfigError("safety.n_neighbors: must be >= 1")


@dataclass(frozen=True, eq=False)
class LimitationMatrices:
    """R, R_Lim, Z_Lim and O, each ``(n_classes, n_directions)``."""

    r: FloatArray
    r_lim: FloatArray
    z_lim: npt.NDArray[np.int64]
    o: npt.NDArray[np.int64]
    directions: DirectionSet
    classifier: ClassifierConfig

    def __post_init__(self) -> None:
        shape = (self.classifier.n_classes, len(self.directions))
        for name in ("r", "r_lim", "z_lim", "o"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ContractViolation(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
        if np.any((self.r < 0) | (self.r > 1)) or np.any((self.r_lim < 0) | (self.r_lim > 1)):
            raise ContractViolation("radii must lie in [0, 1]")
        if np.any(self.z_lim < 0):
            raise ContractViolation("confidence counters must be non-negative")
        if not np.all(np.isin(self.o, (-1, 1))):
            raise ContractViolation("orientations must be -1 or +1")

    @classmethod
    def initial(cls, classifier: ClassifierConfig, directions: DirectionSet) -> LimitationMatrices:
        shape = (classifier.n_classes, len(directions))
        return cls(
            r=np.zeros(shape),
            r_lim=np.zeros(shape),
            z_lim=np.zeros(shape, dtype=np.int64),
            o=np.ones(shape, dtype=np.int64),
            directions=directions,
            classifier=classifier,
        )

    def with_cell(self, k: int, j: int, *, r: float, r_lim: float, z_lim: int, o: int) -> LimitationMatrices:
        arrays = {name: getattr(self, name).copy() for name in ("r", "r_lim", "z_lim", "o")}
        arrays["r"][k, j] = r
        arrays["r_lim"][k, j] = r_lim
        arrays["z_lim"][k, j] = z_lim
        arrays["o"][k, j] = o
        return LimitationMatrices(directions=self.directions, classifier=self.classifier, **arrays)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def map_raw_action(u_raw: RawAction, bounds: ActionBounds) -> ActionVector:
    lo, hi = bounds.lower, bounds.upper
    return ActionVector.from_array(lo + (np.tanh(u_raw.as_array()) + 1.0) / 2.0 * (hi - lo))


def raw_from_action(u: ActionVector, bounds: ActionBounds, limit: float = 5.0) -> RawAction:
    """Inverse of :func:`map_raw_action`, clipped to ``|raw| <= limit``."""
    lo, hi = bounds.lower, bounds.upper
    x = np.clip(2.0 * (u.as_array() - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    with np.errstate(divide="ignore"):
        raw = np.arctanh(x)
    return RawAction.from_array(np.clip(raw, -limit, limit))


def perpendicular_distance(u_norm: npt.ArrayLike, v: npt.ArrayLike) -> float:
    u = np.asarray(u_norm, dtype=np.float64)
    d = np.asarray(v, dtype=np.float64)
    return float(np.linalg.norm(u - (u @ d) / (d @ d) * d))


def neighbor_weights(
    u_norm: FloatArray, k: int, mats: LimitationMatrices, cfg: SafetyConfig
) -> tuple[np.ndarray, FloatArray]:
    """Selected direction indices and their normalized weights (empty if no information)."""
    vectors = mats.directions.vectors
    candidates = np.flatnonzero(vectors @ u_norm > 0.0)
    if candidates.size == 0:
        return candidates, np.zeros(0)
    dist = np.array([perpendicular_distance(u_norm, vectors[j]) for j in candidates])
    order = np.argsort(dist, kind="stable")[: cfg.n_neighbors]
    chosen, d = candidates[order], dist[order]
    z = mats.z_lim[k, chosen].astype(np.float64)
    spread = d.max() - d.min()
    base = np.ones_like(d) if spread <= _DEGENERATE else (d.max() - d) / spread
    raw = base * z
    total = raw.sum()
    if total <= 0.0:
        return chosen, np.zeros(0)
    return chosen, raw / total


def safe_radius(u_norm: npt.ArrayLike, k: int, mats: LimitationMatrices, cfg: SafetyConfig) -> float:
    """Δr_tol plus the counter-weighted k-NN interpolation of neighboring R_Lim."""
    u = np.asarray(u_norm, dtype=np.float64)
    chosen, weights = neighbor_weights(u, k, mats, cfg)
    if weights.size == 0:
        return cfg.delta_r_tol
    return cfg.delta_r_tol + float(weights @ mats.r_lim[k, chosen])


@dataclass(frozen=True)
class FilterResult:
    u_safe: ActionVector
    delta_r_sf: float
    replaced: bool
    u_mapped: ActionVector
    r_safe: float
    norm: float
    class_index: int


def filter_action(
    u_raw: RawAction,
    state: CycleState,
    mats: LimitationMatrices,
    cfg: SafetyConfig,
    bounds: ActionBounds,
) -> FilterResult:
    k = classify_state(state, mats.classifier)
    u = map_raw_action(u_raw, bounds)
    u_start = bounds.start_point(state.pmi_sp)
    u_norm = normalize_action(u, u_start, bounds)
    norm = float(np.linalg.norm(u_norm))
    if norm == 0.0:
        return FilterResult(u, 0.0, False, u, cfg.delta_r_tol, 0.0, k)
    r_safe = safe_radius(u_norm, k, mats, cfg)
    if norm > r_safe:
        u_safe = denormalize_action(r_safe * (u_norm / norm), u_start, bounds)
        return FilterResult(u_safe, min(r_safe - norm, 0.0), True, u, r_safe, norm, k)
    return FilterResult(u, 0.0, False, u, r_safe, norm, k)


class SafetyMonitor:
    """Frozen matrices plus config; ``enabled=False`` passes mapped actions through."""

    def __init__(
        self,
        mats: LimitationMatrices | None,
        cfg: SafetyConfig,
        bounds: ActionBounds,
        *,
        enabled: bool = True,
    ) -> None:
        if enabled and mats is None:
            raise SafetyPreconditionError("safety monitor enabled without limitation matrices")
        if mats is not None and cfg.n_neighbors > len(mats.directions):
            raise ConfigError("safety.n_neighbors: exceeds the number of directions")
        self.mats = mats
        self.cfg = cfg
        self.bounds = bounds
        self.enabled = enabled
        self.replacements = 0

    def filter(self, u_raw: RawAction, state: CycleState) -> FilterResult:
        if not self.enabled or self.mats is None:
            u = map_raw_action(u_raw, self.bounds)
            return FilterResult(u, 0.0, False, u, float("inf"), float("nan"), -1)
        result = filter_action(u_raw, state, self.mats, self.cfg, self.bounds)
        if result.replaced:
            self.replacements += 1
        return result


# ---------------------------------------------------------------------------
# Persistence: CSV + JSON sidecar
# ---------------------------------------------------------------------------


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_matrices(
    path: Path, mats: LimitationMatrices, config_hash: str, *, partial: bool = False, extra: dict[str, Any] | None = None
) -> None:
    n_classes, n_dirs = mats.r.shape
    k_idx, l_idx = np.meshgrid(np.arange(n_classes), np.arange(n_dirs), indexing="ij")
    v = mats.directions.vectors[l_idx.ravel()]
    frame = pd.DataFrame(
        {
            "class_index": k_idx.ravel(),
            "direction_index": l_idx.ravel(),
            "v_x": v[:, 0],
            "v_y": v[:, 1],
            "v_z": v[:, 2],
            "r": mats.r.ravel(),
            "r_lim": mats.r_lim.ravel(),
            "z_lim": mats.z_lim.ravel(),
            "o": mats.o.ravel(),
        }
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    frame.to_csv(tmp, index=False, float_format="%.17g")
    os.replace(tmp, path)
    sidecar = {
        "version": SIDECAR_VERSION,
        "config_hash": config_hash,
        "n_classes": n_classes,
        "n_directions": n_dirs,
        "partial": partial,
        **(extra or {}),
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Limitation matrices written", extra={"path": str(path), "partial": partial})


def load_matrices(
    path: Path, classifier: ClassifierConfig, directions: DirectionSet, expected_hash: str
) -> LimitationMatrices:
    """Read matrices; refuse files from another configuration."""
    side = sidecar_path(path)
    if not path.is_file() or not side.is_file():
        raise SafetyPreconditionError(f"limitation matrices missing: {path}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    if meta.get("config_hash") != expected_hash:
        raise SafetyPreconditionError(
            f"limitation matrices {path} were measured under a different configuration"
        )
    if meta.get("partial"):
        logger.warning("Loading partial limitation matrices", extra={"path": str(path)})
    frame = pd.read_csv(path)
    missing = set(MATRIX_COLUMNS) - set(frame.columns)
    if missing:
        raise SafetyPreconditionError(f"limitation matrices lack columns {sorted(missing)}")
    shape = (classifier.n_classes, len(directions))
    if len(frame) != shape[0] * shape[1]:
        raise SafetyPreconditionError(f"expected {shape[0] * shape[1]} rows, found {len(frame)}")
    frame = frame.sort_values(["class_index", "direction_index"])
    return LimitationMatrices(
        r=frame["r"].to_numpy(np.float64).reshape(shape),
        r_lim=frame["r_lim"].to_numpy(np.float64).reshape(shape),
        z_lim=frame["z_lim"].to_numpy(np.int64).reshape(shape),
        o=frame["o"].to_numpy(np.int64).reshape(shape),
        directions=directions,
        classifier=classifier,
    )
