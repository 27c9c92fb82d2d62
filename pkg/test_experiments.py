"""
test_experiments.py - Metrics, throughput, aggregation and small end-to-end runs
"""

import json

import numpy as np
import pandas as pd
import pytest

from config import ExperimentConfig, write_resolved_config
from errors import ConfigurationError, IngestionError
from experiments import (
    VDP_COLUMNS,
    aggregate,
    binned_errors,
    error_stats,
    mean_std,
    read_trials,
    report_throughput,
    run_experiment,
    run_few_shot_eval,
    run_meta_train,
    run_quad_stab,
    run_quad_track,
    run_vdp_predict,
    settle_time,
    tracking_errors,
    window_mean,
    write_json,
)
from online_adapt import trace_columns


def _cartpole_trace(decay=3.0, duration=2.0, dt=0.02, diverged=False):
    t = np.round(np.arange(0.0, duration + dt / 2, dt), 10)
    frame = pd.DataFrame(0.0, index=range(len(t)), columns=trace_columns(4, 1))
    frame["t"] = t
    frame["x_true_0"] = 0.2 * np.exp(-decay * t)
    frame["x_meas_0"] = frame["x_true_0"]
    frame["solve_ms"] = 2.0
    frame["diverged"] = int(diverged)
    return frame


@pytest.fixture
def cartpole_results(tmp_path):
    cfg = ExperimentConfig(
        experiment="cartpole_stab",
        plant={"kind": "cart_pole"},
        controllers=["nominal"],
        output_dir=str(tmp_path),
        trials=2,
    )
    write_resolved_config(cfg, tmp_path)
    trials = tmp_path / "trials" / "nominal"
    trials.mkdir(parents=True)
    _cartpole_trace().to_csv(trials / "trial_000.csv", index=False)
    _cartpole_trace(decay=0.1).to_csv(trials / "trial_001.csv", index=False)
    return tmp_path


# ==================== Error statistics ====================

def test_error_stats_examples():
    stats = error_stats([1.0, 0.0])
    assert stats["mean"] == pytest.approx(0.5)
    assert stats["rmse"] == pytest.approx(0.70710678)
    assert error_stats([0.0, 0.0]) == {"mean": 0.0, "rmse": 0.0}


def test_mean_std_single_value_and_empty():
    assert mean_std([3.0]) == {"mean": 3.0, "std": 0.0, "n": 1}
    assert mean_std([None, float("nan")]) == {"mean": None, "std": None, "n": 0}
    assert mean_std([1.0, 3.0])["std"] == pytest.approx(1.0)


@pytest.mark.parametrize("inside, expected", [
    ([False, False, True, True], 2.0),
    ([True, True, True, True], 0.0),
    ([True, False, True, False], None),
    ([True, False, False, True], 3.0),
])
def test_settle_time(inside, expected):
    assert settle_time(np.arange(4.0), np.array(inside)) == expected


def test_tracking_errors_use_position_and_altitude():
    frame = pd.DataFrame({
        "t": [0.0, 1.0],
        "x_true_0": [3.0, 0.0], "x_ref_0": [0.0, 0.0],
        "x_true_2": [4.0, 1.0], "x_ref_2": [0.0, 1.0],
    })
    err = tracking_errors(frame)
    assert err["euclid"].tolist() == [5.0, 0.0]
    assert window_mean(err, 0.0, 1.0) == pytest.approx(2.5)
    assert window_mean(err, 1.0, 1.0, "abs_x") == 0.0


def test_binned_errors_average_then_spread_across_trials():
    a = pd.DataFrame({"t": [0.0, 0.25, 0.5], "abs_x": [1.0, 3.0, 0.0], "abs_z": 0.0, "euclid": [1.0, 3.0, 0.0]})
    b = a.assign(euclid=[4.0, 0.0, 2.0])
    bins = binned_errors([a, b], bin_width=0.5)
    assert bins["t"] == [0.0, 0.5]
    assert bins["euclid"]["mean"] == pytest.approx([2.0, 1.0])
    assert bins["euclid"]["std"] == pytest.approx([0.0, 1.0])


# ==================== Throughput ====================

def test_constant_solve_time_gives_500_hz():
    frame = _cartpole_trace()
    report = report_throughput([frame])
    assert report["solve_ms"] == {"median": 2.0, "p95": 2.0}
    assert report["control_frequency_hz"] == pytest.approx(500.0)


def test_no_fine_tune_events_gives_null_frequency():
    report = report_throughput([_cartpole_trace()])
    assert report["ft_ms"] is None
    assert report["finetune_frequency_hz"] is None


def test_fine_tune_timing_counts_events_only():
    frame = _cartpole_trace()
    frame.loc[[10, 20], "finetune_event"] = 1
    frame.loc[[10, 20], "ft_ms"] = [4.0, 6.0]
    frame.loc[30, "ft_ms"] = 100.0
    report = report_throughput([frame])
    assert report["ft_ms"]["median"] == pytest.approx(5.0)
    assert report["finetune_frequency_hz"] == pytest.approx(200.0)


# ==================== Ingestion ====================

def test_missing_column_is_ingestion_error(tmp_path):
    trials = tmp_path / "trials" / "nominal"
    trials.mkdir(parents=True)
    _cartpole_trace().drop(columns="solve_ms").to_csv(trials / "trial_000.csv", index=False)
    with pytest.raises(IngestionError, match="solve_ms"):
        read_trials(tmp_path, "nominal", trace_columns(4, 1))


def test_empty_results_directory_is_ingestion_error(tmp_path):
    cfg = ExperimentConfig(experiment="cartpole_stab", plant={"kind": "cart_pole"}, controllers=["nominal"],
                           output_dir=str(tmp_path))
    write_resolved_config(cfg, tmp_path)
    with pytest.raises(IngestionError):
        aggregate(tmp_path)


def test_aggregate_cartpole_directory(cartpole_results):
    summary = aggregate(cartpole_results)
    nominal = summary["kinds"]["nominal"]

    assert summary["trials"] == {"nominal": 2}
    # 0.2 * exp(-3t) first drops below 0.1 at t = 0.24; the slow trial never settles
    assert nominal["settle_time_per_trial"] == [pytest.approx(0.24), None]
    assert nominal["success_rate"] == 0.5
    assert nominal["diverged"] == 0
    assert summary["throughput"]["nominal"]["control_frequency_hz"] == pytest.approx(500.0)

    on_disk = json.loads((cartpole_results / "summary.json").read_text())
    assert on_disk["kinds"]["nominal"]["success_rate"] == 0.5


def test_aggregate_is_repeatable(cartpole_results):
    assert aggregate(cartpole_results) == aggregate(cartpole_results)


def test_write_json_replaces_non_finite(tmp_path):
    path = write_json({"a": float("nan"), "b": np.float64(1.5), "c": [np.int64(2), float("inf")]}, tmp_path / "x.json")
    assert json.loads(path.read_text()) == {"a": None, "b": 1.5, "c": [2, None]}


# ==================== Runners ====================

VDP_PLANT = {"kind": "van_der_pol", "true_params": {"mu": 0.2}, "nominal_params": {"mu": 0.7}}
VDP_TASKS = {"protocol": "vdp_grid", "rollouts_per_task": 1, "rollout_duration": 2.0}
TINY_META = {"inner_lr": 0.01, "meta_lr": 0.001, "epochs": 3, "k_shot": 10, "refresh_every": 2, "log_every": 1}
TINY_ADAPT = {"update_period": 1.0, "epochs": 2, "batch_size": 50, "buffer_capacity": 50}


@pytest.fixture(scope="module")
def vdp_checkpoint(tmp_path_factory):
    root = tmp_path_factory.mktemp("meta")
    cfg = ExperimentConfig.model_validate({
        "experiment": "meta_train",
        "plant": VDP_PLANT,
        "model": {"layer_sizes": [2, 8, 1]},
        "tasks": VDP_TASKS,
        "meta": TINY_META,
        "adapt": TINY_ADAPT,
        "simulation": {"duration": 2.0, "record_timing": False},
        "checkpoint": str(root / "checkpoint.json"),
    })
    return run_meta_train(cfg)


def test_run_meta_train_writes_checkpoint_and_log(vdp_checkpoint):
    log = pd.read_csv(vdp_checkpoint.parent / "training_log.csv")
    assert list(log["epoch"]) == [0, 1, 2]
    assert (log["wall_ms"] == 0.0).all()
    assert (vdp_checkpoint.parent / "config.json").exists()
    assert (vdp_checkpoint.parent / "meta_loss.svg").exists()


def test_run_vdp_predict_pipeline(tmp_path, vdp_checkpoint):
    cfg = ExperimentConfig.model_validate({
        "experiment": "vdp_predict",
        "plant": VDP_PLANT,
        "model": {"layer_sizes": [2, 8, 1]},
        "controllers": ["nominal", "meta_mlp"],
        "adapt": TINY_ADAPT,
        "simulation": {"duration": 3.0, "noise_sigma": 0.0, "record_timing": False},
        "initial_state": {"fixed": [0.5, 0.5]},
        "checkpoint": str(vdp_checkpoint),
        "trials": 1,
        "output_dir": str(tmp_path),
    })
    summary = run_vdp_predict(cfg)

    nominal = pd.read_csv(tmp_path / "trials" / "nominal" / "trial_000.csv")
    assert list(nominal.columns) == VDP_COLUMNS
    assert sorted(nominal["window"].unique()) == [1, 2]
    assert nominal["ft_loss_before"].isna().all()
    meta = pd.read_csv(tmp_path / "trials" / "meta_mlp" / "trial_000.csv")
    assert meta["ft_loss_before"].notna().all()
    assert summary["kinds"]["nominal"]["rmse"]["n"] == 1
    assert (tmp_path / "vdp_phase.svg").exists()


def test_run_few_shot_eval(tmp_path, vdp_checkpoint):
    cfg = ExperimentConfig.model_validate({
        "experiment": "few_shot_eval",
        "plant": VDP_PLANT,
        "model": {"layer_sizes": [2, 8, 1]},
        "tasks": VDP_TASKS,
        "meta": TINY_META,
        "adapt": TINY_ADAPT,
        "simulation": {"duration": 2.0},
        "few_shot": {"held_out": 2, "seeds": 2},
        "checkpoint": str(vdp_checkpoint),
        "output_dir": str(tmp_path),
    })
    result = run_few_shot_eval(cfg)
    assert result["comparisons"] == 4
    assert 0 <= result["meta_wins"] <= 4
    assert json.loads((tmp_path / "few_shot.json").read_text())["comparisons"] == 4


def _tiny_cartpole(output_dir):
    return ExperimentConfig.model_validate({
        "experiment": "cartpole_stab",
        "plant": {"kind": "cart_pole", "nominal_scale": {"m_c": 0.66, "m_p": 0.66, "l": 0.66}},
        "model": {"layer_sizes": [5, 8, 2]},
        "controllers": ["nominal", "residual_mlp"],
        "ocp": {"horizon": 0.25, "steps": 5, "sqp_max_iters": 3},
        "adapt": {"update_period": 0.1, "epochs": 2, "batch_size": 5, "buffer_capacity": 20},
        "simulation": {"duration": 0.3, "record_timing": False},
        "initial_state": {"low": [-0.2, 0.0, -0.05, 0.0], "high": [0.2, 0.0, 0.05, 0.0]},
        "trials": 2,
        "output_dir": str(output_dir),
    })


def test_cartpole_run_is_reproducible(tmp_path):
    first = run_experiment(_tiny_cartpole(tmp_path / "a"))
    second = run_experiment(_tiny_cartpole(tmp_path / "b"))

    assert first == second
    assert first["trials"] == {"nominal": 2, "residual_mlp": 2}
    for kind in ("nominal", "residual_mlp"):
        for trial in ("trial_000.csv", "trial_001.csv"):
            a = (tmp_path / "a" / "trials" / kind / trial).read_bytes()
            assert a == (tmp_path / "b" / "trials" / kind / trial).read_bytes()
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    assert (tmp_path / "a" / "pole_angle.svg").exists()


def test_wrong_runner_for_plant_rejected(tmp_path):
    cfg = _tiny_cartpole(tmp_path).model_copy(update={"experiment": "quad_stab"})
    with pytest.raises(ConfigurationError):
        run_quad_stab(cfg)


def _tiny_quad_track(output_dir):
    return ExperimentConfig.model_validate({
        "experiment": "quad_track",
        "plant": {"kind": "quad_2d", "nominal_scale": {"m": 0.66, "I_yy": 0.8}},
        "model": {"layer_sizes": [8, 8, 3]},
        "controllers": ["nominal", "residual_mlp"],
        "ocp": {"horizon": 0.25, "steps": 5, "Q": [5.0, 0.1, 5.0, 0.1, 5.0, 0.1], "R": [0.1, 0.1],
                "sqp_max_iters": 3},
        "adapt": {"update_period": 0.1, "epochs": 2, "batch_size": 5, "buffer_capacity": 20},
        "simulation": {"duration": 0.4, "record_timing": False},
        "initial_state": {"fixed": [0.5, 0.0, 1.0, 0.2, 0.0, 0.0]},
        "reference": {"kind": "circle", "center": [0.0, 1.0], "radius": 0.5, "period": 15.0},
        "metrics": {"windows": {"transient": [0.0, 0.2], "steady": [0.2, 0.4]}},
        "trials": 1,
        "output_dir": str(output_dir),
    })


def test_quad_track_run_is_reproducible(tmp_path):
    first = run_quad_track(_tiny_quad_track(tmp_path / "a"))
    second = run_quad_track(_tiny_quad_track(tmp_path / "b"))

    assert first == second
    assert first["trials"] == {"nominal": 1, "residual_mlp": 1}
    nominal = first["kinds"]["nominal"]
    assert set(nominal["window_errors"]) == {"transient", "steady"}
    assert nominal["rmse"]["n"] == 1

    frame = pd.read_csv(tmp_path / "a" / "trials" / "residual_mlp" / "trial_000.csv")
    assert len(frame) == 20
    # circle starts at (center_x + radius, center_z)
    assert frame.loc[0, "x_ref_0"] == pytest.approx(0.5)
    assert frame.loc[0, "x_ref_2"] == pytest.approx(1.0)
    assert (tmp_path / "a" / "xz_overlay.svg").exists()


def test_quad_track_requires_circle_reference(tmp_path):
    cfg = _tiny_quad_track(tmp_path)
    cfg = cfg.model_copy(update={"reference": cfg.reference.model_copy(update={"kind": "constant"})})
    with pytest.raises(ConfigurationError):
        run_quad_track(cfg)
