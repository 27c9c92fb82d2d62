"""
experiments.py - Experiment runners, metrics and aggregation

Each runner writes <output_dir>/config.json, one CSV per (controller kind,
trial) under trials/<kind>/, then folds those CSVs into summary.json and
renders the SVG figures. aggregate() only reads files, so a summary can be
recomputed from a results directory alone.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import ExperimentConfig, OcpConfig, read_resolved_config, write_resolved_config
from dynamics import (
    AugmentedModel,
    DoubleArray,
    PlantSpec,
    PlantTask,
    ReferenceSignal,
    hover_thrust,
    make_plant,
    sample_tasks,
    simulate_true,
    step_ratio,
)
from errors import ConfigurationError, IngestionError
from logger import AuditTrail, PerformanceMonitor, log_run_end, progress_enabled
from metalearn import ExcitationSetup, build_episode, build_task_dataset, evaluate_few_shot, meta_train, pooled_generator
from numcore import MlpModel, load_checkpoint, mlp_init, save_checkpoint
from online_adapt import SampleBuffer, harvest_sample, predict_open_loop, run_closed_loop, trace_columns
from plotting import plot_directory, plot_meta_loss

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Reported next to our own timings; never compared against
REFERENCE_THROUGHPUT = {
    "control_loop_hz": [45, 50],
    "prediction_hz": {"nominal": 10500, "learning": 6200},
}

VDP_COLUMNS = ["t", "window", "x_true_0", "x_true_1", "x_pred_0", "x_pred_1",
               "ft_loss_before", "ft_loss_after", "ft_ms", "predict_ms"]

# Euclidean tracking error is taken over these state indices (cart position / pole
# angle for the cart-pole, x / z for the quadrotor)
TRACKED_INDICES = (0, 2)


# ==================== Setup helpers ====================

def build_plant(cfg: ExperimentConfig) -> PlantSpec:
    return make_plant(
        cfg.plant.kind,
        true_params=cfg.plant.true_params,
        nominal_scale=cfg.plant.nominal_scale,
        input_bounds=cfg.plant.input_bounds,
        nominal_params=cfg.plant.nominal_params,
    )


def ocp_for(cfg: ExperimentConfig, spec: PlantSpec) -> OcpConfig:
    """OCP block with the plant's input box filled in when the config leaves it out."""
    if cfg.ocp.bounds is not None:
        return cfg.ocp
    return cfg.ocp.model_copy(update={"bounds": [list(b) for b in spec.input_bounds]})


def _default_u_ref(spec: PlantSpec) -> DoubleArray:
    # Hover thrust from the nominal mass: the controller cannot know the true one
    if spec.kind == "quad_2d":
        return hover_thrust(spec, nominal=True)
    return np.zeros(spec.input_dim)


def reference_for(cfg: ExperimentConfig, spec: PlantSpec, kind: Optional[str] = None) -> ReferenceSignal:
    ref = cfg.reference
    u_ref = np.asarray(ref.u_ref, float) if ref.u_ref is not None else _default_u_ref(spec)
    if (kind or ref.kind) == "circle":
        return ReferenceSignal.circle(u_ref, tuple(ref.center), ref.radius, ref.period)
    x_ref = np.asarray(ref.x_ref, float) if ref.x_ref is not None else np.zeros(spec.state_dim)
    if x_ref.shape != (spec.state_dim,):
        raise ConfigurationError("reference.x_ref does not match the plant", {"state_dim": spec.state_dim})
    return ReferenceSignal.constant(x_ref, u_ref)


def training_references(cfg: ExperimentConfig, spec: PlantSpec) -> Tuple[ReferenceSignal, ...]:
    """Excitation references: hover and circle alternate for the quadrotor."""
    if spec.kind == "van_der_pol":
        return ()
    if spec.kind == "quad_2d":
        hover = ReferenceSignal.constant([0.0, 0.0, 1.0, 0.0, 0.0, 0.0], _default_u_ref(spec))
        return hover, reference_for(cfg, spec, kind="circle")
    return (reference_for(cfg, spec, kind="constant"),)


def initial_state(cfg: ExperimentConfig, spec: PlantSpec, rng: np.random.Generator) -> DoubleArray:
    if cfg.initial_state is None:
        raise ConfigurationError("initial_state block is required for this experiment")
    if cfg.initial_state.fixed is not None:
        x0 = np.asarray(cfg.initial_state.fixed, float)
    else:
        x0 = rng.uniform(cfg.initial_state.low, cfg.initial_state.high)
    if x0.shape != (spec.state_dim,):
        raise ConfigurationError("initial_state does not match the plant", {"state_dim": spec.state_dim})
    return x0


def load_meta_model(cfg: ExperimentConfig, spec: PlantSpec) -> MlpModel:
    if not cfg.checkpoint:
        raise ConfigurationError("A meta checkpoint is required", {"experiment": cfg.experiment})
    model = load_checkpoint(cfg.checkpoint)
    AugmentedModel(spec, model)  # raises when the architecture does not fit the plant
    return model


def _trial_seed(cfg: ExperimentConfig, trial: int) -> int:
    return cfg.seed + trial


def _trial_path(output_dir: Path, kind: str, trial: int) -> Path:
    return output_dir / "trials" / kind / f"trial_{trial:03d}.csv"


def _starting_residual(kind: str, meta: Optional[MlpModel], cfg: ExperimentConfig, seed: int) -> Optional[MlpModel]:
    if kind == "nominal":
        return None
    if kind == "meta_mlp":
        return meta
    return mlp_init(cfg.model.layer_sizes, cfg.model.activation, seed=seed)


def write_json(payload: Dict[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_clean(payload), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    return path


def _clean(value: Any) -> Any:
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


# ==================== Van der Pol prediction ====================

def run_vdp_predict(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Open-loop prediction benchmark: every window, fine-tune on the last window and predict the next."""
    _expect(cfg, "vdp_predict", "van_der_pol")
    spec = build_plant(cfg)
    output_dir = _begin(cfg)
    meta = load_meta_model(cfg, spec) if "meta_mlp" in cfg.controllers else None

    sim = cfg.simulation
    dt = sim.control_period
    window_steps = step_ratio(cfg.adapt.update_period, dt, "update_period", "control_period")
    horizon_steps = step_ratio(sim.prediction_horizon, dt, "prediction_horizon", "control_period")
    n_steps = step_ratio(sim.duration, dt, "duration", "control_period")

    for trial in tqdm(range(cfg.trials), desc="vdp trials", disable=not progress_enabled()):
        seed = _trial_seed(cfg, trial)
        x0 = initial_state(cfg, spec, np.random.default_rng(np.random.SeedSequence([seed, 0])))
        rollout = simulate_true(spec, x0, np.zeros((n_steps, 0)), dt, sim.duration, sim.substep, sim.noise_sigma, seed)

        for kind in cfg.controllers:
            PerformanceMonitor.start_timer(f"vdp_trial_{trial}_{kind}")
            frame = _vdp_trial(spec, _starting_residual(kind, meta, cfg, seed), rollout.true_states,
                               rollout.measured_states, cfg, window_steps, horizon_steps)
            frame.to_csv(_trial_path(output_dir, kind, trial), index=False, float_format="%.17g")
            PerformanceMonitor.end_timer(f"vdp_trial_{trial}_{kind}", {"rows": len(frame)})
            AuditTrail.log_trial_result(trial, kind, {"rmse": _vdp_trial_rmse(frame)})

    return _finish(cfg, output_dir)


def _vdp_trial(
    spec: PlantSpec,
    residual: Optional[MlpModel],
    true_states: DoubleArray,
    measured: DoubleArray,
    cfg: ExperimentConfig,
    window_steps: int,
    horizon_steps: int,
) -> pd.DataFrame:
    sim = cfg.simulation
    dt = sim.control_period
    model = AugmentedModel(spec, residual)
    buffer = SampleBuffer(max(cfg.adapt.buffer_capacity, window_steps), cfg.adapt.smoothing_width)
    no_input = np.zeros(0)
    learning = residual is not None and cfg.adapt.enabled

    rows = []
    window = 0
    last = len(true_states) - 1
    for start in range(window_steps, last - horizon_steps + 1, window_steps):
        window += 1
        buffer.clear()
        for k in range(start - window_steps + 1, start + 1):
            buffer.add(harvest_sample(measured[k - 1], no_input, measured[k], dt, spec, k * dt))

        result = predict_open_loop(model, measured[start], sim.prediction_horizon, dt, sim.substep,
                                   buffer if learning else None, cfg.adapt)
        model = result.model
        ft = result.fine_tune
        ft_ms = ft.wall_ms if ft is not None else 0.0
        predict_ms = result.wall_ms - ft_ms
        if not sim.record_timing:
            ft_ms = predict_ms = 0.0

        for j in range(1, horizon_steps + 1):
            k = start + j
            rows.append({
                "t": k * dt,
                "window": window,
                "x_true_0": true_states[k, 0],
                "x_true_1": true_states[k, 1],
                "x_pred_0": result.states[j, 0],
                "x_pred_1": result.states[j, 1],
                "ft_loss_before": ft.loss_before if ft is not None else float("nan"),
                "ft_loss_after": ft.loss_after if ft is not None else float("nan"),
                "ft_ms": ft_ms,
                "predict_ms": predict_ms,
            })
    return pd.DataFrame(rows, columns=VDP_COLUMNS)


def _vdp_trial_rmse(frame: pd.DataFrame) -> float:
    err = frame[["x_true_0", "x_true_1"]].to_numpy() - frame[["x_pred_0", "x_pred_1"]].to_numpy()
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1)))) if len(err) else float("nan")


# ==================== Closed-loop experiments ====================

def run_cartpole_stab(cfg: ExperimentConfig) -> Dict[str, Any]:
    _expect(cfg, "cartpole_stab", "cart_pole")
    return _run_control_experiment(cfg)


def run_quad_stab(cfg: ExperimentConfig) -> Dict[str, Any]:
    _expect(cfg, "quad_stab", "quad_2d")
    return _run_control_experiment(cfg)


def run_quad_track(cfg: ExperimentConfig) -> Dict[str, Any]:
    _expect(cfg, "quad_track", "quad_2d")
    if cfg.reference.kind != "circle":
        raise ConfigurationError("quad_track needs a circle reference")
    return _run_control_experiment(cfg)


def _run_control_experiment(cfg: ExperimentConfig) -> Dict[str, Any]:
    spec = build_plant(cfg)
    output_dir = _begin(cfg)
    meta = load_meta_model(cfg, spec) if "meta_mlp" in cfg.controllers else None
    ocp = ocp_for(cfg, spec)
    reference = reference_for(cfg, spec)
    task = PlantTask(spec, "evaluation")

    for trial in tqdm(range(cfg.trials), desc=f"{cfg.experiment} trials", disable=not progress_enabled()):
        seed = _trial_seed(cfg, trial)
        x0 = initial_state(cfg, spec, np.random.default_rng(np.random.SeedSequence([seed, 0])))
        for kind in cfg.controllers:
            PerformanceMonitor.start_timer(f"{cfg.experiment}_trial_{trial}_{kind}")
            trace = run_closed_loop(task, kind, _starting_residual(kind, meta, cfg, seed), ocp, cfg.adapt,
                                    reference, x0, cfg.simulation, seed)
            trace.write_csv(_trial_path(output_dir, kind, trial))
            PerformanceMonitor.end_timer(f"{cfg.experiment}_trial_{trial}_{kind}", {"rows": len(trace.rows)})

            if kind != "nominal":
                AuditTrail.log_finetune_summary(trial, kind, trace.events["accepted"], trace.events["rejected"],
                                                trace.events["skipped"])
            if trace.events["holds"]:
                AuditTrail.log_solver_holds(trial, kind, trace.events["holds"])
            AuditTrail.log_trial_result(trial, kind, {"failed": trace.failed, "rows": len(trace.rows)})

    return _finish(cfg, output_dir)


# ==================== Meta-training / few-shot ====================

def _task_setup(cfg: ExperimentConfig, spec: PlantSpec) -> ExcitationSetup:
    return ExcitationSetup(cfg.tasks, cfg.simulation, ocp_for(cfg, spec) if spec.input_dim else None,
                           training_references(cfg, spec))


def run_meta_train(cfg: ExperimentConfig) -> Path:
    """Sample the task family, pool rollouts per task, meta-train and write checkpoint + log."""
    _expect(cfg, "meta_train", cfg.plant.kind)
    spec = build_plant(cfg)
    checkpoint = Path(cfg.checkpoint)
    AuditTrail.log_experiment_start(cfg.experiment, spec.kind, cfg.tasks.count, cfg.seed, str(checkpoint.parent))
    write_resolved_config(cfg, checkpoint.parent)

    tasks = sample_tasks(spec, cfg.tasks.protocol, cfg.tasks.count, cfg.tasks.value_range, cfg.seed,
                         cfg.tasks.scaled_params)
    setup = _task_setup(cfg, spec)

    PerformanceMonitor.start_timer("task_pools")
    datasets = [
        build_task_dataset(task, setup, seed=int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0]))
        for i, task in enumerate(tqdm(tasks, desc="task rollouts", disable=not progress_enabled()))
    ]
    PerformanceMonitor.end_timer("task_pools", {"tasks": len(tasks)})

    initial = mlp_init(cfg.model.layer_sizes, cfg.model.activation, seed=cfg.seed)
    AugmentedModel(spec, initial)  # raises if the layer sizes do not fit the plant
    generators = [pooled_generator(ds, cfg.meta.k_shot) for ds in datasets]

    PerformanceMonitor.start_timer("meta_train")
    model, log = meta_train(generators, initial, cfg.meta, cfg.seed, cfg.simulation.record_timing)
    PerformanceMonitor.end_timer("meta_train", {"epochs": cfg.meta.epochs})

    save_checkpoint(model, checkpoint)
    log.to_csv(checkpoint.parent / "training_log.csv", index=False, float_format="%.17g")
    AuditTrail.log_checkpoint(str(checkpoint), model.param_count, cfg.meta.epochs)
    plot_meta_loss(checkpoint.parent / "training_log.csv", checkpoint.parent / "meta_loss.svg")
    log_run_end(cfg.experiment, str(checkpoint.parent))
    return checkpoint


def _held_out_tasks(cfg: ExperimentConfig, spec: PlantSpec) -> List[PlantTask]:
    """Tasks outside the training set: off-grid mu for Van der Pol, a fresh draw otherwise."""
    if spec.kind == "van_der_pol":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        tasks = []
        for i in range(cfg.few_shot.held_out):
            mu = float(rng.uniform(0.0, 1.0))
            base = PlantSpec(spec.kind, {"mu": mu}, spec.nominal_params, spec.input_bounds)
            tasks.append(PlantTask(base, f"held-out-{i:03d}", {"mu": mu / spec.nominal_params["mu"]}))
        return tasks
    return sample_tasks(spec, "scale_range", cfg.few_shot.held_out, cfg.tasks.value_range, cfg.seed + 1,
                        cfg.tasks.scaled_params)


def run_few_shot_eval(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Meta-trained vs freshly initialized networks on held-out tasks, over several seeds."""
    _expect(cfg, "few_shot_eval", cfg.plant.kind)
    spec = build_plant(cfg)
    output_dir = _begin(cfg)
    meta = load_meta_model(cfg, spec)
    setup = _task_setup(cfg, spec)
    k_shot, alpha, steps, loss = cfg.meta.k_shot, cfg.meta.inner_lr, cfg.meta.inner_steps, cfg.meta.loss

    records = []
    for i, task in enumerate(tqdm(_held_out_tasks(cfg, spec), desc="held-out tasks", disable=not progress_enabled())):
        dataset = build_task_dataset(task, setup, seed=cfg.seed + 1000 + i)
        for s in range(cfg.few_shot.seeds):
            episode = build_episode(task, k_shot, seed=cfg.seed + s, dataset=dataset)
            fresh = mlp_init(cfg.model.layer_sizes, cfg.model.activation, seed=cfg.seed + s)
            meta_pre, meta_post = evaluate_few_shot(meta, episode, alpha, steps, loss)
            fresh_pre, fresh_post = evaluate_few_shot(fresh, episode, alpha, steps, loss)
            records.append({
                "task": task.task_id, "seed": s,
                "meta_pre": meta_pre, "meta_post": meta_post,
                "fresh_pre": fresh_pre, "fresh_post": fresh_post,
            })

    frame = pd.DataFrame(records)
    wins = int((frame["meta_post"] < frame["fresh_post"]).sum())
    result = {
        "records": records,
        "meta_wins": wins,
        "comparisons": len(frame),
        "mean_meta_post": float(frame["meta_post"].mean()),
        "mean_fresh_post": float(frame["fresh_post"].mean()),
        "adaptation_gain": float((frame["meta_pre"] - frame["meta_post"]).mean()),
    }
    write_json(result, output_dir / "few_shot.json")
    logger.info(f"Few-shot: meta beat fresh on {wins}/{len(frame)} comparisons")
    log_run_end(cfg.experiment, str(output_dir))
    return result


# ==================== Dispatch ====================

RUNNERS = {
    "vdp_predict": run_vdp_predict,
    "cartpole_stab": run_cartpole_stab,
    "quad_stab": run_quad_stab,
    "quad_track": run_quad_track,
    "meta_train": run_meta_train,
    "few_shot_eval": run_few_shot_eval,
}


def run_experiment(cfg: ExperimentConfig):
    return RUNNERS[cfg.experiment](cfg)


def cfg_output(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def _expect(cfg: ExperimentConfig, experiment: str, plant_kind: str) -> None:
    if cfg.experiment != experiment or cfg.plant.kind != plant_kind:
        raise ConfigurationError(
            f"Config is for {cfg.experiment}/{cfg.plant.kind}, expected {experiment}/{plant_kind}"
        )


def _begin(cfg: ExperimentConfig) -> Path:
    output_dir = cfg_output(cfg)
    write_resolved_config(cfg, output_dir)
    for kind in cfg.controllers:
        (output_dir / "trials" / kind).mkdir(parents=True, exist_ok=True)
    AuditTrail.log_experiment_start(cfg.experiment, cfg.plant.kind, cfg.trials, cfg.seed, str(output_dir))
    return output_dir


def _finish(cfg: ExperimentConfig, output_dir: Path) -> Dict[str, Any]:
    summary = aggregate(output_dir)
    plot_directory(output_dir)
    log_run_end(cfg.experiment, str(output_dir))
    return summary


# ==================== Metrics ====================

def error_stats(errors: Sequence[float]) -> Dict[str, float]:
    """Mean and root-mean-square of a flat error sample."""
    e = np.asarray(errors, dtype=np.float64)
    return {"mean": float(np.mean(e)), "rmse": float(np.sqrt(np.mean(e * e)))}


def mean_std(values: Sequence[float]) -> Dict[str, Optional[float]]:
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": int(v.size)}


def settle_time(t: DoubleArray, inside: DoubleArray) -> Optional[float]:
    """Earliest t* with inside[t] true for every t >= t*; None if the last sample is outside."""
    inside = np.asarray(inside, dtype=bool)
    if inside.size == 0 or not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    return float(t[0] if outside.size == 0 else t[outside[-1] + 1])


def cartpole_settle_time(frame: pd.DataFrame, metrics) -> Optional[float]:
    """Settle time inside (|p|, |theta|, velocities) < (position_tol, angle_tol, velocity_tol)."""
    if frame["diverged"].any():
        return None
    err = {i: (frame[f"x_true_{i}"] - frame[f"x_ref_{i}"]).abs().to_numpy() for i in range(4)}
    inside = (
        (err[0] < metrics.position_tol)
        & (err[2] < metrics.angle_tol)
        & (err[1] < metrics.velocity_tol)
        & (err[3] < metrics.velocity_tol)
    )
    return settle_time(frame["t"].to_numpy(), inside)


def tracking_errors(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-row |x| and |z| (state indices 0 and 2) errors and their Euclidean norm."""
    a, b = TRACKED_INDICES
    ex = (frame[f"x_true_{a}"] - frame[f"x_ref_{a}"]).abs()
    ez = (frame[f"x_true_{b}"] - frame[f"x_ref_{b}"]).abs()
    return pd.DataFrame({"t": frame["t"], "abs_x": ex, "abs_z": ez, "euclid": np.sqrt(ex * ex + ez * ez)})


def binned_errors(errors: Sequence[pd.DataFrame], bin_width: float) -> Dict[str, Any]:
    """Per-time-bin mean over trials (and std across trials) of each error column."""
    per_trial = []
    for i, err in enumerate(errors):
        bins = np.floor(err["t"].to_numpy() / bin_width + 1e-9).astype(int)
        means = err.drop(columns="t").groupby(bins).mean()
        means["trial"] = i
        per_trial.append(means)
    if not per_trial:
        return {}
    stacked = pd.concat(per_trial).rename_axis("bin").reset_index()
    grouped = stacked.groupby("bin")
    result: Dict[str, Any] = {"t": [float(b * bin_width) for b in grouped.groups.keys()]}
    for col in ("abs_x", "abs_z", "euclid"):
        result[col] = {
            "mean": grouped[col].mean().tolist(),
            "std": grouped[col].std(ddof=0).fillna(0.0).tolist(),
        }
    return result


def window_mean(err: pd.DataFrame, start: float, end: float, column: str = "euclid") -> float:
    mask = (err["t"] >= start - 1e-9) & (err["t"] <= end + 1e-9)
    return float(err.loc[mask, column].mean()) if mask.any() else float("nan")


def _concat(columns: Sequence[pd.Series]) -> np.ndarray:
    return np.concatenate([c.to_numpy(dtype=np.float64) for c in columns]) if columns else np.empty(0)


def _per_event(frame: pd.DataFrame, column: str) -> pd.Series:
    """One timing per fine-tune event (closed-loop traces) or per prediction window (vdp traces)."""
    if "finetune_event" in frame:
        return frame.loc[frame["finetune_event"] == 1, column]
    first = frame.groupby("window", sort=True).first()
    if column == "ft_ms":
        return first.loc[first["ft_loss_before"].notna(), column]
    return first[column]


def report_throughput(traces: Sequence[pd.DataFrame]) -> Dict[str, Any]:
    """Solver and fine-tune timing percentiles plus the implied loop frequencies."""
    def stats(values: np.ndarray) -> Optional[Dict[str, float]]:
        if values.size == 0:
            return None
        return {"median": float(np.median(values)), "p95": float(np.percentile(values, 95))}

    def hz(block: Optional[Dict[str, float]]) -> Optional[float]:
        if block is None or block["median"] <= 0.0:
            return None
        return 1000.0 / block["median"]

    frames = [f for f in traces if len(f)]
    solve = _concat([f["solve_ms"] for f in frames if "solve_ms" in f])
    ft = _concat([_per_event(f, "ft_ms") for f in frames])
    predict = _concat([_per_event(f, "predict_ms") for f in frames if "predict_ms" in f])

    solve_stats, ft_stats, predict_stats = stats(solve), stats(ft), stats(predict)
    return {
        "solve_ms": solve_stats,
        "control_frequency_hz": hz(solve_stats),
        "ft_ms": ft_stats,
        "finetune_frequency_hz": hz(ft_stats),
        "predict_ms": predict_stats,
        "predictions_per_s": hz(predict_stats),
        "reference": REFERENCE_THROUGHPUT,
    }


# ==================== Aggregation ====================

def _required_columns(cfg: ExperimentConfig, spec_dims: Tuple[int, int]) -> List[str]:
    if cfg.experiment == "vdp_predict":
        return VDP_COLUMNS
    return trace_columns(*spec_dims)


def read_trials(directory: PathLike, kind: str, required: Sequence[str]) -> List[pd.DataFrame]:
    files = sorted((Path(directory) / "trials" / kind).glob("trial_*.csv"))
    frames = []
    for path in files:
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise IngestionError(f"Cannot parse {path}: {e}", {"file": str(path)}) from e
        missing = [c for c in required if c not in frame.columns]
        if missing:
            raise IngestionError(f"{path} is missing column '{missing[0]}'", {"file": str(path), "column": missing[0]})
        frames.append(frame)
    return frames


def aggregate(directory: PathLike) -> Dict[str, Any]:
    """Fold every per-trial CSV under `directory` into summary.json."""
    directory = Path(directory)
    cfg = read_resolved_config(directory)
    spec = build_plant(cfg)
    required = _required_columns(cfg, (spec.state_dim, spec.input_dim))

    PerformanceMonitor.start_timer("aggregate")
    trials = {kind: read_trials(directory, kind, required) for kind in cfg.controllers}
    if not any(trials.values()):
        raise IngestionError(f"No trial files found under {directory / 'trials'}", {"file": str(directory)})

    summary: Dict[str, Any] = {
        "experiment": cfg.experiment,
        "plant": cfg.plant.kind,
        "seed": cfg.seed,
        "trials": {kind: len(frames) for kind, frames in trials.items()},
        "kinds": {},
        "throughput": {kind: report_throughput(frames) for kind, frames in trials.items()},
        "definitions": _definitions(cfg),
    }

    for kind, frames in trials.items():
        if cfg.experiment == "vdp_predict":
            summary["kinds"][kind] = _summarize_vdp(frames)
        elif cfg.experiment == "cartpole_stab":
            summary["kinds"][kind] = _summarize_cartpole(frames, cfg)
        else:
            summary["kinds"][kind] = _summarize_quad(frames, cfg)

    write_json(summary, directory / "summary.json")
    PerformanceMonitor.end_timer("aggregate", {"directory": str(directory)})
    return _clean(summary)


def _definitions(cfg: ExperimentConfig) -> Dict[str, Any]:
    m = cfg.metrics
    return {
        "success": (f"exists t* with |p|<{m.position_tol}, |theta|<{m.angle_tol}, velocities<{m.velocity_tol} "
                    f"for all t >= t*; settle_time = earliest t*"),
        "reach": f"Euclidean (x, z) error < {m.error_threshold} for all later t, reached by {m.reach_deadline} s",
        "steady_state": f"mean Euclidean error over the last {m.steady_state_window} s",
        "std": "population std across trials (ddof=0)",
        "bin_width": m.bin_width,
        "windows": {k: list(v) for k, v in m.windows.items()},
    }


def _summarize_vdp(frames: List[pd.DataFrame]) -> Dict[str, Any]:
    rmses = [_vdp_trial_rmse(f) for f in frames]
    errors = np.concatenate([
        np.linalg.norm(f[["x_true_0", "x_true_1"]].to_numpy() - f[["x_pred_0", "x_pred_1"]].to_numpy(), axis=1)
        for f in frames
    ]) if frames else np.empty(0)
    return {
        "rmse": mean_std(rmses),
        "rmse_per_trial": rmses,
        "pooled": error_stats(errors) if errors.size else None,
    }


def _summarize_cartpole(frames: List[pd.DataFrame], cfg: ExperimentConfig) -> Dict[str, Any]:
    settles = [cartpole_settle_time(f, cfg.metrics) for f in frames]
    errors = [tracking_errors(f) for f in frames]
    rmses = [float(np.sqrt(np.mean(e["euclid"] ** 2))) for e in errors]
    success = [s is not None for s in settles]
    return {
        "success_rate": float(np.mean(success)) if success else 0.0,
        "settle_time": mean_std([s for s in settles if s is not None]),
        "settle_time_per_trial": settles,
        "rmse": mean_std(rmses),
        "diverged": int(sum(bool(f["diverged"].any()) for f in frames)),
        "bins": binned_errors(errors, cfg.metrics.bin_width),
    }


def _summarize_quad(frames: List[pd.DataFrame], cfg: ExperimentConfig) -> Dict[str, Any]:
    m = cfg.metrics
    errors = [tracking_errors(f) for f in frames]
    reach = [
        None if f["diverged"].any() else settle_time(e["t"].to_numpy(), (e["euclid"] < m.error_threshold).to_numpy())
        for f, e in zip(frames, errors)
    ]
    steady, steady_z = [], []
    for e in errors:
        t_end = float(e["t"].iloc[-1]) if len(e) else 0.0
        steady.append(window_mean(e, t_end - m.steady_state_window, t_end))
        steady_z.append(window_mean(e, t_end - m.steady_state_window, t_end, "abs_z"))

    reached = [r is not None and r <= m.reach_deadline for r in reach]
    return {
        "rmse": mean_std([float(np.sqrt(np.mean(e["euclid"] ** 2))) for e in errors]),
        "mean_euclidean_error": mean_std([float(e["euclid"].mean()) for e in errors]),
        "steady_state_error": mean_std(steady),
        "steady_state_z_error": mean_std(steady_z),
        "time_to_threshold": mean_std([r for r in reach if r is not None]),
        "time_to_threshold_per_trial": reach,
        "reached_by_deadline_rate": float(np.mean(reached)) if reached else 0.0,
        "success_rate": float(np.mean(reached)) if reached else 0.0,
        "window_errors": {name: mean_std([window_mean(e, lo, hi) for e in errors]) for name, (lo, hi) in m.windows.items()},
        "diverged": int(sum(bool(f["diverged"].any()) for f in frames)),
        "bins": binned_errors(errors, m.bin_width),
    }
