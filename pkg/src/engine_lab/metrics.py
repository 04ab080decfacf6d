"""Aggregation of cycle logs into summaries, curves, histograms and figures.

All metrics are computed from the raw per-cycle columns (``s_pmi_sp``,
``pmi``, ``alpha50``, ``dpmax``, ``m_g``, ``m_e``, ``misfire``), so training,
validation and measurement logs can all be summarized.
"""

from __future__ import annotations

import json
import logging
import math
import os
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .core import PA_PER_BAR, EngineConstants
from .error_service import ContractViolation
from .reward import COMPONENTS

logger = logging.getLogger(__name__)

GROUP_CYCLES = 1000
_REQUIRED = ("s_pmi_sp", "pmi", "alpha50", "dpmax", "m_g", "m_e", "misfire")


def rmse(values: Any, target: Any) -> float:
    diff = np.asarray(values, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(diff**2))) if diff.size else float("nan")


def stability(alpha50: Any) -> float:
    """``sqrt(sum((Δα50)²))`` over consecutive cycles."""
    a = np.asarray(alpha50, dtype=np.float64)
    return float(np.sqrt(np.sum(np.diff(a) ** 2))) if a.size > 1 else 0.0


def dp_violations(dpmax: Any, limit: float) -> tuple[int, float]:
    """Number of cycles above *limit* and their mean overshoot (0 without violations)."""
    dp = np.asarray(dpmax, dtype=np.float64)
    over = dp[dp > limit] - limit
    return int(over.size), float(over.mean()) if over.size else 0.0


def efficiency_series(frame: pd.DataFrame, constants: EngineConstants) -> pd.Series:
    energy = frame["m_g"] * constants.lcv_g + frame["m_e"] * constants.lcv_e
    work = frame["pmi"] * PA_PER_BAR * constants.displacement_m3
    eta = (work / energy.where(energy > 0)).where(frame["misfire"] == 0)
    return eta


def ethanol_share_series(frame: pd.DataFrame, constants: EngineConstants) -> pd.Series:
    energy = frame["m_g"] * constants.lcv_g + frame["m_e"] * constants.lcv_e
    return (frame["m_e"] * constants.lcv_e / energy.where(energy > 0)).fillna(0.0)


def summarize(frame: pd.DataFrame, constants: EngineConstants, x_eth_sp: float = 0.5) -> dict[str, float]:
    """Load-tracking, stability, safety and efficiency figures of one block of cycles."""
    missing = [c for c in _REQUIRED if c not in frame.columns]
    if missing:
        raise ContractViolation(f"cycle log lacks columns {missing}")
    if frame.empty:
        raise ContractViolation("cannot summarize an empty cycle log")
    violations, overshoot = dp_violations(frame["dpmax"], constants.dpmax_lim)
    eta = efficiency_series(frame, constants)
    x_eth = ethanol_share_series(frame, constants)
    out = {
        "cycles": float(len(frame)),
        "rmse_pmi": rmse(frame["pmi"], frame["s_pmi_sp"]),
        "stability": stability(frame["alpha50"]),
        "dp_violations": float(violations),
        "dp_mean_overshoot": overshoot,
        "dp_violation_rate": violations / len(frame),
        "mean_eta": float(eta.mean()) if eta.notna().any() else float("nan"),
        "ethanol_rmse": rmse(x_eth, np.full(len(frame), x_eth_sp)),
        "misfires": float(frame["misfire"].sum()),
    }
    if "reward" in frame.columns:
        out["cumulative_reward"] = float(frame["reward"].sum())
    if "replaced" in frame.columns:
        out["replacements"] = float(frame["replaced"].sum())
    return out


def grouped_curve(frame: pd.DataFrame, group: int = GROUP_CYCLES) -> pd.DataFrame:
    """Reward totals (and per-component sums) per block of *group* consecutive cycles."""
    if frame.empty:
        raise ContractViolation("cannot group an empty cycle log")
    cols = ["reward", *(f"r_{name}" for name in COMPONENTS if f"r_{name}" in frame.columns)]
    blocks = np.arange(len(frame)) // group
    curve = frame[cols].groupby(blocks).sum()
    curve.insert(0, "cycles", frame.groupby(blocks).size().to_numpy())
    curve.index.name = "group"
    return curve.reset_index()


def dpmax_histogram(frame: pd.DataFrame, window: int = GROUP_CYCLES, bin_width: float = 0.25) -> pd.DataFrame:
    """dp_max counts of the first and last *window* cycles on shared bins."""
    if frame.empty:
        raise ContractViolation("cannot histogram an empty cycle log")
    first = frame["dpmax"].to_numpy()[:window]
    last = frame["dpmax"].to_numpy()[-window:]
    top = max(float(np.max(first)), float(np.max(last)), bin_width)
    edges = np.arange(int(np.floor(top / bin_width)) + 2) * bin_width
    c_first, _ = np.histogram(first, bins=edges)
    c_last, _ = np.histogram(last, bins=edges)
    return pd.DataFrame(
        {"bin_low": edges[:-1], "bin_high": edges[1:], "first": c_first, "last": c_last}
    )


def json_safe(value: Any) -> Any:
    """Replace non-finite floats by None, recursively, so the output is strict JSON."""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def atomic_write_json(path: Path, data: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(json_safe(data), indent=2, sort_keys=True, allow_nan=False), encoding="utf-8")
    os.replace(tmp, path)


def _plot(curve: pd.DataFrame, hist: pd.DataFrame, out_dir: Path, dpmax_lim: float) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = [out_dir / "training_curve.png", out_dir / "dpmax_hist.png"]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(curve["group"], curve["reward"], marker="o", label="total")
    for col in curve.columns:
        if col.startswith("r_"):
            ax.plot(curve["group"], curve[col], linewidth=0.8, alpha=0.7, label=col[2:])
    ax.set_xlabel(f"group of {GROUP_CYCLES} cycles")
    ax.set_ylabel("cumulative reward")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(paths[0], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    centers = (hist["bin_low"] + hist["bin_high"]) / 2.0
    width = float(hist["bin_high"].iloc[0] - hist["bin_low"].iloc[0])
    ax.bar(centers, hist["first"], width=width, alpha=0.5, label="first cycles")
    ax.bar(centers, hist["last"], width=width, alpha=0.5, label="last cycles")
    ax.axvline(dpmax_lim, color="k", linestyle="--", linewidth=1)
    ax.set_xlabel("dp_max [bar/°CA]")
    ax.set_ylabel("cycles")
    ax.legend()
    fig.tight_layout()
    fig.savefig(paths[1], dpi=120)
    plt.close(fig)
    return paths


def export_metrics(
    log_path: Path,
    out_dir: Path,
    constants: EngineConstants,
    x_eth_sp: float = 0.5,
    *,
    plot: bool = False,
) -> dict[str, Any]:
    """Write ``summary.json``, ``training_curve.csv`` and ``dpmax_hist.csv`` next to each other."""
    if not log_path.is_file():
        raise ContractViolation(f"cycle log not found: {log_path}")
    frame = pd.read_csv(log_path)
    if frame.empty:
        raise ContractViolation(f"cycle log is empty: {log_path}")
    summary: dict[str, Any] = {"all": summarize(frame, constants, x_eth_sp)}
    training = frame
    if "kind" in frame.columns:
        for kind, block in frame.groupby("kind", sort=True):
            summary[str(kind)] = summarize(block, constants, x_eth_sp)
        if "episode" in frame.columns and (frame["kind"] == "validation").any():
            val = frame[frame["kind"] == "validation"]
            summary["validation_episodes"] = [
                {"episode": int(ep), **summarize(block, constants, x_eth_sp)}
                for ep, block in val.groupby("episode", sort=True)
            ]
        training = frame[frame["kind"] != "validation"]
        if training.empty:
            training = frame
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {"summary": out_dir / "summary.json", "hist": out_dir / "dpmax_hist.csv"}
    hist = dpmax_histogram(training)
    hist.to_csv(outputs["hist"], index=False)
    curve = None
    if "reward" in training.columns:
        curve = grouped_curve(training)
        outputs["curve"] = out_dir / "training_curve.csv"
        curve.to_csv(outputs["curve"], index=False)
    atomic_write_json(outputs["summary"], summary)
    if plot and curve is not None:
        for path in _plot(curve, hist, out_dir, constants.dpmax_lim):
            outputs[path.stem] = path
    logger.info("Metrics exported", extra={"out_dir": str(out_dir), "cycles": len(frame)})
    return {"summary": summary, "paths": {k: str(v) for k, v in outputs.items()}}
