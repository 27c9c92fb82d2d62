"""
online_adapt.py - Sense, learn, act loop

Harvests residual-acceleration samples from measurements, fine-tunes the
residual network every update period, swaps the new parameters into the
controller between solves and records one trace row per control period.
"""

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config import CONTROLLER_KINDS, AdaptConfig, OcpConfig, SimulationConfig
from dynamics import (
    DIVERGENCE_NORM,
    AugmentedModel,
    DoubleArray,
    PlantSpec,
    PlantTask,
    ReferenceSignal,
    add_measurement_noise,
    advance_true,
    eval_nominal,
    reference_at,
    rk4_step,
    step_ratio,
)
from errors import ConfigurationError, NumericError
from nmpc import MpcController, mpc_step
from numcore import MlpModel, OptimizerState, flatten_params, mlp_loss, mlp_loss_and_gradient, optimizer_step, unflatten_params

logger = logging.getLogger(__name__)


# ==================== Samples ====================

@dataclass(frozen=True, eq=False)
class ResidualSample:
    inputs: DoubleArray
    label: DoubleArray
    t: float


def harvest_sample(
    prev_state: DoubleArray,
    prev_input: DoubleArray,
    curr_state: DoubleArray,
    control_period: float,
    spec: PlantSpec,
    t: float = 0.0,
) -> Optional[ResidualSample]:
    """Backward-difference acceleration minus the nominal acceleration at step k-1.

    Returns None when the label is not finite; the caller counts the drop.
    """
    prev_state = np.asarray(prev_state, dtype=np.float64)
    prev_input = np.asarray(prev_input, dtype=np.float64).reshape(spec.input_dim)
    curr_state = np.asarray(curr_state, dtype=np.float64)

    observed = (curr_state[1::2] - prev_state[1::2]) / control_period
    predicted = eval_nominal(spec, prev_state, prev_input)[1::2]
    label = observed - predicted
    inputs = np.concatenate([prev_state, prev_input])
    if not (np.all(np.isfinite(label)) and np.all(np.isfinite(inputs))):
        return None
    return ResidualSample(inputs=inputs, label=label, t=float(t))


def finite_difference_labels(
    spec: PlantSpec,
    states: DoubleArray,
    controls: DoubleArray,
    control_period: float,
) -> Tuple[DoubleArray, DoubleArray]:
    """harvest_sample over a whole trajectory; non-finite rows are dropped."""
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64).reshape(len(states) - 1, spec.input_dim)
    observed = (states[1:, 1::2] - states[:-1, 1::2]) / control_period
    labels = observed - eval_nominal(spec, states[:-1], controls)[:, 1::2]
    inputs = np.concatenate([states[:-1], controls], axis=1)
    keep = np.all(np.isfinite(labels), axis=1) & np.all(np.isfinite(inputs), axis=1)
    return inputs[keep], labels[keep]


class SampleBuffer:
    """Bounded FIFO of residual samples; the oldest sample is evicted first."""

    def __init__(self, capacity: int, smoothing_width: int = 1):
        if capacity < 1:
            raise ConfigurationError("Buffer capacity must be >= 1", {"capacity": capacity})
        self.capacity = capacity
        self.smoothing_width = smoothing_width
        self._samples: Deque[ResidualSample] = deque(maxlen=capacity)
        self.dropped = 0

    def __len__(self) -> int:
        return len(self._samples)

    def add(self, sample: Optional[ResidualSample]) -> None:
        if sample is None:
            self.dropped += 1
            logger.debug(f"Dropped non-finite sample ({self.dropped} so far)")
            return
        self._samples.append(sample)

    def latest(self, count: int) -> Tuple[DoubleArray, DoubleArray]:
        """Inputs and labels of the `count` most recent samples, oldest first."""
        recent = list(self._samples)[-count:]
        inputs = np.stack([s.inputs for s in recent])
        labels = np.stack([s.label for s in recent])
        if self.smoothing_width > 1:
            labels = pd.DataFrame(labels).rolling(self.smoothing_width, min_periods=1).mean().to_numpy()
        return inputs, labels

    def clear(self) -> None:
        self._samples.clear()


# ==================== Fine-tuning ====================

@dataclass(frozen=True, eq=False)
class FineTuneResult:
    model: MlpModel
    loss_before: float
    loss_after: float
    status: str  # accepted / rejected / skipped
    wall_ms: float = 0.0

    @property
    def executed(self) -> bool:
        return self.status != "skipped"


def fine_tune(model: MlpModel, buffer: SampleBuffer, cfg: AdaptConfig) -> FineTuneResult:
    """Full-batch passes over the K most recent samples.

    The input model is never modified; a rejected update returns it unchanged.
    """
    started = time.perf_counter()
    if len(buffer) < cfg.batch_size:
        return FineTuneResult(model, float("nan"), float("nan"), "skipped")

    inputs, labels = buffer.latest(cfg.batch_size)
    loss_before = mlp_loss(model, inputs, labels, cfg.loss)

    state = OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate)
    theta = flatten_params(model)
    try:
        for _ in range(cfg.epochs):
            _, grad = mlp_loss_and_gradient(unflatten_params(model, theta), inputs, labels, cfg.loss)
            theta = optimizer_step(state, theta, grad)
        updated = unflatten_params(model, theta)
        loss_after = mlp_loss(updated, inputs, labels, cfg.loss)
    except NumericError as e:
        logger.warning(f"Fine-tune diverged, keeping previous model: {e}")
        return FineTuneResult(model, loss_before, float("nan"), "rejected", _elapsed_ms(started))

    if not np.isfinite(loss_after) or loss_after > cfg.reject_ratio * loss_before:
        logger.warning(f"Fine-tune rejected: loss {loss_before:.4g} -> {loss_after:.4g}")
        return FineTuneResult(model, loss_before, loss_after, "rejected", _elapsed_ms(started))

    return FineTuneResult(updated, loss_before, loss_after, "accepted", _elapsed_ms(started))


def _elapsed_ms(started: float) -> float:
    return (time.perf_counter() - started) * 1000.0


# ==================== Trace ====================

@dataclass
class RolloutTrace:
    """One row per control period; column layout fixed by the plant dims."""

    state_dim: int
    input_dim: int
    rows: List[Dict[str, float]] = field(default_factory=list)
    failed: bool = False
    events: Dict[str, int] = field(default_factory=lambda: {"accepted": 0, "rejected": 0, "skipped": 0, "holds": 0})

    def columns(self) -> List[str]:
        return trace_columns(self.state_dim, self.input_dim)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns())

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


def trace_columns(state_dim: int, input_dim: int) -> List[str]:
    cols = ["t"]
    cols += [f"x_true_{i}" for i in range(state_dim)]
    cols += [f"x_meas_{i}" for i in range(state_dim)]
    cols += [f"u_{i}" for i in range(input_dim)]
    cols += [f"x_ref_{i}" for i in range(state_dim)]
    cols += ["solver_iters", "solver_cost", "solve_ms", "finetune_event", "ft_loss_before", "ft_loss_after",
             "ft_ms", "ft_rejected", "solver_held", "diverged"]
    return cols


# ==================== Closed loop ====================

def run_closed_loop(
    task: PlantTask,
    kind: str,
    residual: Optional[MlpModel],
    ocp: OcpConfig,
    adapt: AdaptConfig,
    reference: ReferenceSignal,
    x0: DoubleArray,
    sim: SimulationConfig,
    seed: int = 0,
) -> RolloutTrace:
    """Simulate one trial: measure, harvest, maybe fine-tune, solve, apply.

    Args:
        task: plant with the true parameters of this trial
        kind: nominal, residual_mlp or meta_mlp
        residual: starting network (None for nominal)
        ocp: MPC configuration, bounds already filled in
        adapt: fine-tune schedule; ignored for the nominal kind
        reference: set-point or circular reference
        x0: true initial state
        sim: timing, noise and timing-record switch
        seed: measurement-noise seed

    Returns:
        RolloutTrace; on plant divergence the trace ends early with failed=True
    """
    if kind not in CONTROLLER_KINDS:
        raise ConfigurationError(f"Unknown controller kind '{kind}'", {"allowed": CONTROLLER_KINDS})
    if (kind == "nominal") != (residual is None):
        raise ConfigurationError("Only the nominal controller runs without a residual network", {"kind": kind})

    spec = task.base
    dt = sim.control_period
    n_steps = step_ratio(sim.duration, dt, "duration", "control_period")
    update_every = step_ratio(adapt.update_period, dt, "update_period", "control_period")
    adaptive = kind != "nominal" and adapt.enabled

    model = AugmentedModel(spec, residual)
    controller = MpcController(model, ocp, reference)
    buffer = SampleBuffer(adapt.buffer_capacity, adapt.smoothing_width)
    rng = np.random.default_rng(seed)
    trace = RolloutTrace(spec.state_dim, spec.input_dim)

    x_true = np.asarray(x0, dtype=np.float64)
    prev: Optional[Tuple[DoubleArray, DoubleArray]] = None

    for k in range(n_steps):
        t = k * dt
        x_meas = add_measurement_noise(x_true, sim.noise_sigma, rng)

        if prev is not None:
            buffer.add(harvest_sample(prev[0], prev[1], x_meas, dt, spec, t))

        ft_event, ft_rejected = 0, 0
        ft_before = ft_after = float("nan")
        ft_ms = 0.0
        if adaptive and k > 0 and k % update_every == 0:
            result = fine_tune(model.residual, buffer, adapt)
            trace.events[result.status] += 1
            if result.executed:
                ft_event = 1
                ft_before, ft_after = result.loss_before, result.loss_after
                ft_ms = result.wall_ms if sim.record_timing else 0.0
                ft_rejected = int(result.status == "rejected")
            if result.status == "accepted":
                model = model.with_residual(result.model)
                controller.swap_model(model)

        step = mpc_step(controller, t, x_meas)
        x_ref, _ = reference_at(reference, t)
        sol = step.solution
        trace.events["holds"] += int(step.held)

        row = {"t": t}
        row.update({f"x_true_{i}": v for i, v in enumerate(x_true)})
        row.update({f"x_meas_{i}": v for i, v in enumerate(x_meas)})
        row.update({f"u_{i}": v for i, v in enumerate(step.control)})
        row.update({f"x_ref_{i}": v for i, v in enumerate(x_ref)})
        row.update({
            "solver_iters": sol.iters if sol is not None else 0,
            "solver_cost": sol.cost if sol is not None else float("nan"),
            "solve_ms": (sol.solve_time * 1000.0 if sol is not None else 0.0) if sim.record_timing else 0.0,
            "finetune_event": ft_event,
            "ft_loss_before": ft_before,
            "ft_loss_after": ft_after,
            "ft_ms": ft_ms,
            "ft_rejected": ft_rejected,
            "solver_held": int(step.held),
            "diverged": 0,
        })
        trace.rows.append(row)

        try:
            x_next = advance_true(spec, x_true, step.control, dt, sim.substep)
            if np.linalg.norm(x_next) > DIVERGENCE_NORM:
                raise NumericError("State norm exceeded the divergence threshold")
        except NumericError as e:
            logger.warning(f"Plant diverged at t={t:.2f}s ({kind}, {task.task_id}): {e}")
            trace.rows[-1]["diverged"] = 1
            trace.failed = True
            break

        prev = (x_meas, step.control)
        x_true = x_next

    return trace


# ==================== Open-loop prediction ====================

@dataclass(frozen=True, eq=False)
class PredictionResult:
    model: AugmentedModel
    states: DoubleArray
    fine_tune: Optional[FineTuneResult]
    wall_ms: float


def predict_open_loop(
    model: AugmentedModel,
    x_current: DoubleArray,
    horizon: float,
    control_period: float,
    substep: float,
    buffer: Optional[SampleBuffer] = None,
    adapt: Optional[AdaptConfig] = None,
    controls: Optional[DoubleArray] = None,
) -> PredictionResult:
    """Fine-tune on the buffered window (learning variants), then roll out `horizon` seconds.

    Returned states are sampled every control period, starting at x_current.
    """
    started = time.perf_counter()
    ft: Optional[FineTuneResult] = None
    if model.residual is not None and buffer is not None and adapt is not None and adapt.enabled:
        if len(buffer) < adapt.batch_size:
            raise ConfigurationError(
                "Prediction window holds fewer samples than the fine-tune batch",
                {"samples": len(buffer), "batch_size": adapt.batch_size},
            )
        ft = fine_tune(model.residual, buffer, adapt)
        if ft.status == "accepted":
            model = model.with_residual(ft.model)

    n_steps = step_ratio(horizon, control_period, "horizon", "control_period")
    n_sub = step_ratio(control_period, substep, "control_period", "substep")
    h = control_period / n_sub
    if controls is None:
        controls = np.zeros((n_steps, model.input_dim))

    x = np.asarray(x_current, dtype=np.float64)
    states = np.empty((n_steps + 1, model.state_dim))
    states[0] = x
    for k in range(n_steps):
        for _ in range(n_sub):
            x = rk4_step(model.derivative, x, controls[k], h)
        states[k + 1] = x

    return PredictionResult(model, states, ft, _elapsed_ms(started))
