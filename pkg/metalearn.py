"""
metalearn.py - MAML meta-training of the residual network

Episodes are K-shot support/query splits drawn from per-task pools of
simulated rollouts. The inner loop is plain gradient descent; the outer
loop averages first-order or exact second-order meta-gradients over the
task batch in a fixed order and applies an SGD step.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import ExcitationConfig, MetaConfig, OcpConfig, SimulationConfig, TaskConfig
from dynamics import (
    DIVERGENCE_NORM,
    AugmentedModel,
    DoubleArray,
    PlantSpec,
    PlantTask,
    ReferenceSignal,
    add_measurement_noise,
    advance_true,
    reference_at,
    rk4_sensitivities,
    step_ratio,
    true_residual,
)
from errors import ConfigurationError, NumericError, TrainingError
from logger import AuditTrail, progress_enabled
from nmpc import MpcController, discrete_lqr_gain, mpc_step
from numcore import (
    MlpModel,
    OptimizerState,
    finite_difference_hvp,
    flatten_params,
    mlp_loss,
    mlp_loss_and_gradient,
    mlp_param_gradient,
    optimizer_step,
    unflatten_params,
)
from online_adapt import finite_difference_labels

logger = logging.getLogger(__name__)

MAX_RESAMPLES = 10
VDP_INITIAL_BOX = ((-2.0, -2.0), (2.0, 2.0))


# ==================== Episodes ====================

@dataclass(frozen=True, eq=False)
class EpisodeData:
    task_id: str
    support_inputs: DoubleArray
    support_targets: DoubleArray
    query_inputs: DoubleArray
    query_targets: DoubleArray

    def __post_init__(self) -> None:
        k = len(self.support_inputs)
        if k < 1 or len(self.query_inputs) != k or len(self.support_targets) != k or len(self.query_targets) != k:
            raise ConfigurationError("Support and query sets must both hold exactly K samples",
                                     {"task": self.task_id, "support": k, "query": len(self.query_inputs)})
        if not (np.all(np.isfinite(self.support_targets)) and np.all(np.isfinite(self.query_targets))):
            raise NumericError("Episode targets are not finite", {"task": self.task_id})

    @property
    def k_shot(self) -> int:
        return len(self.support_inputs)


@dataclass(frozen=True, eq=False)
class TaskDataset:
    """Labeled samples pooled from several rollouts of one task."""

    task: PlantTask
    inputs: DoubleArray
    targets: DoubleArray

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class ExcitationSetup:
    """Everything needed to simulate training rollouts for a task family."""

    tasks: TaskConfig
    simulation: SimulationConfig
    ocp: Optional[OcpConfig] = None
    references: Tuple[ReferenceSignal, ...] = ()

    @property
    def excitation(self) -> ExcitationConfig:
        return self.tasks.excitation


def _initial_box(spec: PlantSpec, tasks: TaskConfig) -> Tuple[DoubleArray, DoubleArray]:
    if tasks.initial_low is not None and tasks.initial_high is not None:
        low, high = np.asarray(tasks.initial_low, float), np.asarray(tasks.initial_high, float)
    elif spec.kind == "van_der_pol":
        low, high = np.asarray(VDP_INITIAL_BOX[0]), np.asarray(VDP_INITIAL_BOX[1])
    else:
        raise ConfigurationError("Controlled plants need tasks.initial_low/initial_high", {"kind": spec.kind})
    if low.shape != (spec.state_dim,) or high.shape != (spec.state_dim,):
        raise ConfigurationError("Initial-state box does not match the plant", {"state_dim": spec.state_dim})
    return low, high


class _ExcitationPolicy:
    """Input generator for one rollout: nominal MPC, LQR about the reference or uniform noise."""

    def __init__(self, spec: PlantSpec, setup: ExcitationSetup, reference: Optional[ReferenceSignal],
                 rng: np.random.Generator):
        self.spec = spec
        self.cfg = setup.excitation
        self.reference = reference
        self.rng = rng
        self.lower, self.upper = spec.lower_bounds, spec.upper_bounds
        self.controller: Optional[MpcController] = None
        self.gain: Optional[DoubleArray] = None

        if self.cfg.policy == "nominal_mpc":
            ocp = setup.ocp.model_copy(update={"sqp_max_iters": self.cfg.sqp_max_iters})
            self.controller = MpcController(AugmentedModel(spec, None), ocp, reference)
        elif self.cfg.policy == "lqr":
            x_ref, u_ref = reference_at(reference, 0.0)
            _, A_d, B_d = rk4_sensitivities(AugmentedModel(spec, None), x_ref, u_ref, setup.simulation.control_period)
            self.gain = discrete_lqr_gain(A_d, B_d, setup.ocp.Q, setup.ocp.R)

    def __call__(self, t: float, x: DoubleArray) -> DoubleArray:
        span = self.upper - self.lower
        if self.cfg.policy == "random":
            return self.rng.uniform(self.lower, self.upper)
        if self.controller is not None:
            u = mpc_step(self.controller, t, x).control
        else:
            x_ref, u_ref = reference_at(self.reference, t)
            u = u_ref - self.gain @ (x - x_ref)
        u = u + self.cfg.dither * span * self.rng.uniform(-0.5, 0.5, size=span.shape)
        return np.clip(u, self.lower, self.upper)


def _simulate_rollout(
    task: PlantTask,
    setup: ExcitationSetup,
    reference: Optional[ReferenceSignal],
    seed: int,
) -> Tuple[DoubleArray, DoubleArray, DoubleArray]:
    """One excitation rollout: (true states, measured states, controls)."""
    spec = task.base
    sim = setup.simulation
    rng = np.random.default_rng(seed)
    low, high = _initial_box(spec, setup.tasks)
    n_steps = step_ratio(setup.tasks.rollout_duration, sim.control_period, "rollout_duration", "control_period")

    policy = _ExcitationPolicy(spec, setup, reference, rng) if spec.input_dim > 0 else None
    x = rng.uniform(low, high)
    states = np.empty((n_steps + 1, spec.state_dim))
    measured = np.empty_like(states)
    controls = np.zeros((n_steps, spec.input_dim))
    states[0] = x
    measured[0] = add_measurement_noise(x, sim.noise_sigma, rng)
    for k in range(n_steps):
        if policy is not None:
            controls[k] = policy(k * sim.control_period, measured[k])
        x = advance_true(spec, x, controls[k], sim.control_period, sim.substep)
        if np.linalg.norm(x) > DIVERGENCE_NORM:
            raise NumericError("Excitation rollout diverged", {"task": task.task_id, "step": k})
        states[k + 1] = x
        measured[k + 1] = add_measurement_noise(x, sim.noise_sigma, rng)
    return states, measured, controls


def build_task_dataset(task: PlantTask, setup: ExcitationSetup, seed: int = 0) -> TaskDataset:
    """Simulate rollouts_per_task rollouts and label every transition.

    Diverged rollouts are discarded and redrawn with the next seed. For
    controlled plants the rollouts cycle through setup.references.
    """
    inputs: List[DoubleArray] = []
    targets: List[DoubleArray] = []
    attempt_seed = seed
    for r in range(setup.tasks.rollouts_per_task):
        reference = setup.references[r % len(setup.references)] if setup.references else None
        for _ in range(MAX_RESAMPLES):
            try:
                states, measured, controls = _simulate_rollout(task, setup, reference, attempt_seed)
                break
            except NumericError as e:
                logger.warning(f"Resampling rollout for {task.task_id}: {e}")
                attempt_seed += 1
        else:
            raise TrainingError("Every excitation rollout diverged", {"task": task.task_id})
        attempt_seed += 1

        dt = setup.simulation.control_period
        if setup.tasks.label_mode == "analytic":
            x_in = states[:-1]
            inputs.append(np.concatenate([x_in, controls], axis=1))
            targets.append(true_residual(task.base, x_in, controls))
        else:
            x_in, y = finite_difference_labels(task.base, measured, controls, dt)
            inputs.append(x_in)
            targets.append(y)

    return TaskDataset(task, np.concatenate(inputs), np.concatenate(targets))


def build_episode(
    task: PlantTask,
    k_shot: int,
    seed: int,
    dataset: Optional[TaskDataset] = None,
    setup: Optional[ExcitationSetup] = None,
) -> EpisodeData:
    """Draw 2K distinct pool samples for `task` and split them into support and query."""
    if k_shot < 1:
        raise ConfigurationError("K must be >= 1", {"K": k_shot})
    if dataset is None:
        if setup is None:
            raise ConfigurationError("build_episode needs a dataset or an excitation setup")
        dataset = build_task_dataset(task, setup, seed)
    if len(dataset) < 2 * k_shot:
        raise ConfigurationError("Task pool is smaller than 2K", {"task": task.task_id, "pool": len(dataset), "K": k_shot})

    rng = np.random.default_rng(seed)
    picks = rng.choice(len(dataset), size=2 * k_shot, replace=False)
    support, query = picks[:k_shot], picks[k_shot:]
    return EpisodeData(
        task_id=task.task_id,
        support_inputs=dataset.inputs[support],
        support_targets=dataset.targets[support],
        query_inputs=dataset.inputs[query],
        query_targets=dataset.targets[query],
    )


EpisodeGenerator = Callable[[int], EpisodeData]


def pooled_generator(dataset: TaskDataset, k_shot: int) -> EpisodeGenerator:
    def generate(seed: int) -> EpisodeData:
        return build_episode(dataset.task, k_shot, seed, dataset=dataset)
    return generate


# ==================== Inner / outer loop ====================

def inner_adapt(
    model: MlpModel,
    inputs: DoubleArray,
    targets: DoubleArray,
    alpha: float,
    steps: int = 1,
    loss: str = "mse",
    task_id: str = "",
) -> MlpModel:
    """theta' = theta - alpha * grad L_support(theta), repeated `steps` times."""
    return _inner_trajectory(model, inputs, targets, alpha, steps, loss, task_id)[-1]


def _inner_trajectory(
    model: MlpModel,
    inputs: DoubleArray,
    targets: DoubleArray,
    alpha: float,
    steps: int,
    loss: str,
    task_id: str,
) -> List[MlpModel]:
    if steps < 1:
        raise ConfigurationError("inner_steps must be >= 1", {"steps": steps})
    path = [model]
    theta = flatten_params(model)
    for step in range(steps):
        grad = mlp_param_gradient(path[-1], inputs, targets, loss)
        if not np.all(np.isfinite(grad)):
            raise TrainingError("Non-finite support gradient", {"task": task_id, "step": step})
        theta = theta - alpha * grad
        path.append(unflatten_params(model, theta))
    return path


def _meta_gradient_and_loss(model: MlpModel, episode: EpisodeData, cfg: MetaConfig) -> Tuple[DoubleArray, float]:
    path = _inner_trajectory(model, episode.support_inputs, episode.support_targets,
                             cfg.inner_lr, cfg.inner_steps, cfg.loss, episode.task_id)
    query_loss, grad = mlp_loss_and_gradient(path[-1], episode.query_inputs, episode.query_targets, cfg.loss)
    if not cfg.second_order:
        return grad, query_loss

    # d theta_{j+1} / d theta_j = I - alpha * H_support(theta_j), chained in reverse
    X, Y = episode.support_inputs, episode.support_targets
    for adapted in reversed(path[:-1]):
        def support_grad(params: DoubleArray, template: MlpModel = adapted) -> DoubleArray:
            return mlp_param_gradient(unflatten_params(template, params), X, Y, cfg.loss)

        grad = grad - cfg.inner_lr * finite_difference_hvp(support_grad, flatten_params(adapted), grad)
    return grad, query_loss


def meta_gradient(model: MlpModel, episode: EpisodeData, cfg: MetaConfig) -> DoubleArray:
    """Gradient of the post-adaptation query loss w.r.t. the meta-parameters.

    First-order: grad L_query(theta'). Second-order: the same vector pulled
    back through every inner step with Hessian-vector products.
    """
    return _meta_gradient_and_loss(model, episode, cfg)[0]


def _episode_seed(seed: int, task_index: int, round_index: int) -> int:
    return int(np.random.SeedSequence([seed, task_index, round_index]).generate_state(1)[0])


def meta_train(
    generators: Sequence[EpisodeGenerator],
    initial: MlpModel,
    cfg: MetaConfig,
    seed: int = 0,
    record_timing: bool = True,
) -> Tuple[MlpModel, pd.DataFrame]:
    """Meta-train `initial` over the task generators.

    Episodes are redrawn every cfg.refresh_every epochs. Task-batch
    reduction runs in task-index order, so a (seed, cfg) pair always
    gives the same parameters.

    Returns:
        (meta-trained model, per-epoch log with epoch, mean_query_loss, grad_norm, wall_ms)
    """
    if not generators:
        raise ConfigurationError("meta_train needs at least one task")

    n_tasks = len(generators)
    batch = n_tasks if cfg.task_batch is None else min(cfg.task_batch, n_tasks)
    optimizer = OptimizerState(kind="sgd", learning_rate=cfg.meta_lr)
    theta = flatten_params(initial)
    model = initial
    episodes: List[EpisodeData] = []
    log_rows = []

    for epoch in tqdm(range(cfg.epochs), desc="meta-train", disable=not progress_enabled()):
        started = time.perf_counter()
        if epoch % cfg.refresh_every == 0:
            round_index = epoch // cfg.refresh_every
            episodes = [gen(_episode_seed(seed, i, round_index)) for i, gen in enumerate(generators)]

        if batch < n_tasks:
            picker = np.random.default_rng(np.random.SeedSequence([seed, epoch, n_tasks]))
            chosen = np.sort(picker.choice(n_tasks, size=batch, replace=False))
        else:
            chosen = np.arange(n_tasks)

        total = np.zeros_like(theta)
        losses = []
        for i in chosen:
            grad, loss = _meta_gradient_and_loss(model, episodes[i], cfg)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingError("Non-finite meta loss", {"epoch": epoch, "task": episodes[i].task_id})
            total += grad
            losses.append(loss)

        mean_grad = total / len(chosen)
        theta = optimizer_step(optimizer, theta, mean_grad)
        model = unflatten_params(initial, theta)

        row = {
            "epoch": epoch,
            "mean_query_loss": float(np.mean(losses)),
            "grad_norm": float(np.linalg.norm(mean_grad)),
            "wall_ms": (time.perf_counter() - started) * 1000.0 if record_timing else 0.0,
        }
        log_rows.append(row)
        if (epoch + 1) % cfg.log_every == 0 or epoch == cfg.epochs - 1:
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: query loss {row['mean_query_loss']:.6g}, "
                        f"|g| {row['grad_norm']:.3g}")
            AuditTrail.log_meta_epoch(epoch + 1, row["mean_query_loss"], row["grad_norm"])

    return model, pd.DataFrame(log_rows, columns=["epoch", "mean_query_loss", "grad_norm", "wall_ms"])


def evaluate_few_shot(
    model: MlpModel,
    held_out: EpisodeData,
    alpha: float,
    steps: int = 1,
    loss: str = "mse",
) -> Tuple[float, float]:
    """Query loss before and after adapting on the held-out support set."""
    pre = mlp_loss(model, held_out.query_inputs, held_out.query_targets, loss)
    if alpha == 0.0:
        return pre, pre
    adapted = inner_adapt(model, held_out.support_inputs, held_out.support_targets, alpha, steps, loss,
                          held_out.task_id)
    post = mlp_loss(adapted, held_out.query_inputs, held_out.query_targets, loss)
    return pre, post
