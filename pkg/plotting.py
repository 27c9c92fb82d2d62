"""
plotting.py - SVG figures for experiment result directories
Reads config.json, summary.json and the per-trial CSVs; identical inputs give byte-identical SVGs
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from errors import ConfigurationError

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "adaptive-mpc"
plt.rcParams["svg.fonttype"] = "none"

KIND_COLORS = {"nominal": "indianred", "residual_mlp": "darkorange", "meta_mlp": "steelblue"}
KIND_LABELS = {"nominal": "Nominal MPC", "residual_mlp": "Nominal + MLP", "meta_mlp": "Nominal + MetaMLP"}
MAX_OVERLAY_TRIALS = 10

PathLike = Union[str, Path]


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Figure saved to: {path}")
    return path


def _trial_frames(directory: Path, kind: str, limit: int = 0) -> List[pd.DataFrame]:
    files = sorted((directory / "trials" / kind).glob("trial_*.csv"))
    if limit:
        files = files[:limit]
    return [pd.read_csv(f) for f in files]


# ==================== Meta-training ====================

def plot_meta_loss(log_csv: PathLike, output_path: PathLike) -> Path:
    log = pd.read_csv(log_csv)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(log["epoch"], log["mean_query_loss"], color="steelblue", linewidth=1.2, label="mean query loss")
    ax.set_yscale("log")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Query loss")
    ax.set_title("Meta-training")
    ax.grid(True, alpha=0.3, linestyle="--")
    ax.legend(loc="upper right")
    return _save(fig, Path(output_path))


# ==================== Van der Pol ====================

def plot_vdp(directory: Path, kinds: List[str]) -> List[Path]:
    """Time evolution and phase portrait of the first trial with every predicted window."""
    frames = {kind: _trial_frames(directory, kind, limit=1) for kind in kinds}
    frames = {kind: f[0] for kind, f in frames.items() if f}
    if not frames:
        return []
    truth = next(iter(frames.values()))

    fig, axes = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    for i, ax in enumerate(axes):
        ax.plot(truth["t"], truth[f"x_true_{i}"], ".", color="black", markersize=2, label="true")
        for kind, frame in frames.items():
            for w, (_, window) in enumerate(frame.groupby("window", sort=True)):
                ax.plot(window["t"], window[f"x_pred_{i}"], color=KIND_COLORS.get(kind), linewidth=1.0,
                        label=KIND_LABELS.get(kind, kind) if w == 0 else None)
        ax.set_ylabel(f"$x_{i + 1}$")
        ax.grid(True, alpha=0.3, linestyle="--")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[-1].set_xlabel("t [s]")
    time_path = _save(fig, directory / "vdp_time.svg")

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(truth["x_true_0"], truth["x_true_1"], ".", color="black", markersize=2, label="true")
    for kind, frame in frames.items():
        for w, (_, window) in enumerate(frame.groupby("window", sort=True)):
            ax.plot(window["x_pred_0"], window["x_pred_1"], color=KIND_COLORS.get(kind), linewidth=1.0,
                    label=KIND_LABELS.get(kind, kind) if w == 0 else None)
    ax.set_xlabel("$x_1$")
    ax.set_ylabel("$x_2$")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3, linestyle="--")
    return [time_path, _save(fig, directory / "vdp_phase.svg")]


# ==================== Closed loop ====================

def plot_error_bins(summary: Dict, directory: Path) -> List[Path]:
    """One figure per error column: per-bin mean with a +/- std band for each controller kind."""
    titles = {"abs_x": "|x| error [m]", "abs_z": "|z| error [m]", "euclid": "Euclidean error [m]"}
    if summary.get("plant") == "cart_pole":
        titles = {"abs_x": "|p| error [m]", "abs_z": "|theta| error [rad]", "euclid": "combined error"}

    paths = []
    for column, label in titles.items():
        fig, ax = plt.subplots(figsize=(9, 4.5))
        for kind, block in summary.get("kinds", {}).items():
            bins = block.get("bins") or {}
            if not bins:
                continue
            t = np.asarray(bins["t"], float)
            mean = np.asarray([np.nan if v is None else v for v in bins[column]["mean"]], float)
            std = np.asarray([0.0 if v is None else v for v in bins[column]["std"]], float)
            color = KIND_COLORS.get(kind)
            ax.fill_between(t, mean - std, mean + std, alpha=0.2, color=color)
            ax.plot(t, mean, "o-", color=color, linewidth=1.5, markersize=3, label=KIND_LABELS.get(kind, kind))
        ax.set_xlabel("t [s]")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3, linestyle="--")
        ax.legend(loc="upper right", fontsize=9)
        paths.append(_save(fig, directory / f"errors_{column}.svg"))
    return paths


def plot_xz_overlay(directory: Path, kinds: List[str], config: Dict) -> Path:
    """x-z paths of up to ten trials per controller kind, with the reference."""
    fig, axes = plt.subplots(1, len(kinds), figsize=(5 * len(kinds), 5), squeeze=False)
    ref = config.get("reference", {})
    for ax, kind in zip(axes[0], kinds):
        for frame in _trial_frames(directory, kind, limit=MAX_OVERLAY_TRIALS):
            ax.plot(frame["x_true_0"], frame["x_true_2"], color=KIND_COLORS.get(kind), linewidth=0.8, alpha=0.7)
        if ref.get("kind") == "circle":
            phase = np.linspace(0.0, 2.0 * np.pi, 200)
            cx, cz = ref.get("center", [0.0, 1.0])
            radius = ref.get("radius", 0.5)
            ax.plot(cx + radius * np.cos(phase), cz + radius * np.sin(phase), "--", color="black", linewidth=1.0)
        else:
            x_ref = ref.get("x_ref") or [0.0, 0.0, 1.0]
            ax.plot([x_ref[0]], [x_ref[2]], "x", color="black", markersize=8)
        ax.set_title(KIND_LABELS.get(kind, kind))
        ax.set_xlabel("x [m]")
        ax.set_ylabel("z [m]")
        ax.set_aspect("equal", adjustable="datalim")
        ax.grid(True, alpha=0.3, linestyle="--")
    return _save(fig, directory / "xz_overlay.svg")


def plot_pole_angle(directory: Path, kinds: List[str]) -> Path:
    """Pole angle mean +/- std across trials, aligned on the control grid."""
    fig, ax = plt.subplots(figsize=(9, 4.5))
    for kind in kinds:
        frames = _trial_frames(directory, kind)
        if not frames:
            continue
        stacked = pd.concat([f[["t", "x_true_2"]] for f in frames]).groupby("t")["x_true_2"]
        mean, std = stacked.mean(), stacked.std(ddof=0).fillna(0.0)
        color = KIND_COLORS.get(kind)
        ax.fill_between(mean.index, mean - std, mean + std, alpha=0.2, color=color)
        ax.plot(mean.index, mean.values, color=color, linewidth=1.5, label=KIND_LABELS.get(kind, kind))
    ax.set_xlabel("t [s]")
    ax.set_ylabel("theta [rad]")
    ax.grid(True, alpha=0.3, linestyle="--")
    ax.legend(loc="upper right", fontsize=9)
    return _save(fig, directory / "pole_angle.svg")


def plot_directory(directory: PathLike) -> List[Path]:
    """Render every figure that applies to the experiment stored in `directory`."""
    directory = Path(directory)
    config_path = directory / "config.json"
    if not config_path.exists():
        raise ConfigurationError("No config.json in results directory", {"path": str(directory)})
    with open(config_path, "r", encoding="utf-8") as f:
        config = json.load(f)

    experiment = config["experiment"]
    if experiment == "meta_train":
        return [plot_meta_loss(directory / "training_log.csv", directory / "meta_loss.svg")]
    if experiment == "few_shot_eval":
        return []

    kinds = config.get("controllers", [])
    if experiment == "vdp_predict":
        return plot_vdp(directory, kinds)

    summary_path = directory / "summary.json"
    if not summary_path.exists():
        raise ConfigurationError("Run aggregate before plot", {"path": str(directory)})
    with open(summary_path, "r", encoding="utf-8") as f:
        summary = json.load(f)

    paths = plot_error_bins(summary, directory)
    if experiment == "cartpole_stab":
        paths.append(plot_pole_angle(directory, kinds))
    else:
        paths.append(plot_xz_overlay(directory, kinds, config))
    return paths
