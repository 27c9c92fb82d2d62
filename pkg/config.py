"""
config.py - Experiment configuration
Pydantic models for every block of the experiment JSON, .env defaults and CLI overrides
"""

import json
import logging
import math
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigurationError

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = os.getenv("ADAPTMPC_OUTPUT_DIR", "results")

EXPERIMENTS = ("vdp_predict", "cartpole_stab", "quad_stab", "quad_track", "meta_train", "few_shot_eval")
CONTROLLER_KINDS = ("nominal", "residual_mlp", "meta_mlp")

ExperimentKind = Literal["vdp_predict", "cartpole_stab", "quad_stab", "quad_track", "meta_train", "few_shot_eval"]
ControllerKind = Literal["nominal", "residual_mlp", "meta_mlp"]
Bounds = List[Tuple[float, float]]


def _is_multiple(total: float, step: float) -> bool:
    ratio = total / step
    return round(ratio) >= 1 and abs(round(ratio) * step - total) <= 1e-9 * max(1.0, abs(total))


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ==================== Network / plant / tasks ====================

class ModelConfig(_Block):
    layer_sizes: List[int] = Field(default_factory=lambda: [2, 64, 64, 1])
    activation: Literal["tanh", "relu"] = "tanh"

    @field_validator("layer_sizes")
    @classmethod
    def _check_sizes(cls, value: List[int]) -> List[int]:
        if len(value) < 2 or any(n < 1 for n in value):
            raise ValueError("layer_sizes needs >= 2 entries, all >= 1")
        return value


class PlantConfig(_Block):
    kind: Literal["van_der_pol", "cart_pole", "quad_2d"]
    true_params: Dict[str, float] = Field(default_factory=dict)
    nominal_scale: Dict[str, float] = Field(default_factory=dict)
    nominal_params: Optional[Dict[str, float]] = None
    input_bounds: Optional[Bounds] = None

    @field_validator("input_bounds")
    @classmethod
    def _ordered(cls, value: Optional[Bounds]) -> Optional[Bounds]:
        if value is not None and any(lo > hi for lo, hi in value):
            raise ValueError("input bounds must satisfy u_min <= u_max")
        return value


class ExcitationConfig(_Block):
    """Input policy used to generate meta-training rollouts on controlled plants."""

    policy: Literal["nominal_mpc", "lqr", "random"] = "nominal_mpc"
    dither: float = Field(0.1, ge=0.0)
    sqp_max_iters: int = Field(5, ge=1)


class TaskConfig(_Block):
    protocol: Literal["vdp_grid", "scale_range"] = "scale_range"
    count: int = Field(50, ge=1)
    value_range: Tuple[float, float] = Field((0.75, 2.0), alias="range")
    scaled_params: Optional[List[str]] = None
    rollouts_per_task: int = Field(3, ge=1)
    rollout_duration: float = Field(10.0, gt=0.0)
    label_mode: Literal["finite_difference", "analytic"] = "finite_difference"
    initial_low: Optional[List[float]] = None
    initial_high: Optional[List[float]] = None
    excitation: ExcitationConfig = Field(default_factory=ExcitationConfig)

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @field_validator("value_range")
    @classmethod
    def _positive_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = value
        if not (0.0 < lo <= hi):
            raise ValueError("range must satisfy 0 < lo <= hi")
        return value


# ==================== Solver / adaptation / meta-learning ====================

class OcpConfig(_Block):
    horizon: float = Field(1.0, gt=0.0)
    steps: int = Field(20, ge=1)
    Q: List[float] = Field(default_factory=lambda: [5.0, 0.1, 5.0, 0.1])
    R: List[float] = Field(default_factory=lambda: [0.1])
    bounds: Optional[Bounds] = None
    sqp_max_iters: int = Field(30, ge=1)
    sqp_tol: float = Field(1e-6, gt=0.0)
    reg_lambda: float = Field(1e-6, ge=0.0)
    line_search_halvings: int = Field(10, ge=0)

    @field_validator("Q", "R")
    @classmethod
    def _non_negative(cls, value: List[float]) -> List[float]:
        if any(w < 0.0 or not math.isfinite(w) for w in value):
            raise ValueError("weights must be finite and >= 0")
        return value

    @field_validator("bounds")
    @classmethod
    def _ordered(cls, value: Optional[Bounds]) -> Optional[Bounds]:
        if value is not None and any(lo > hi for lo, hi in value):
            raise ValueError("bounds must satisfy u_min <= u_max")
        return value

    @property
    def dt(self) -> float:
        return self.horizon / self.steps


class AdaptConfig(_Block):
    enabled: bool = True
    update_period: float = Field(0.2, gt=0.0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(20, ge=1)
    loss: Literal["mae", "mse"] = "mae"
    optimizer: Literal["adam", "sgd"] = "adam"
    learning_rate: float = Field(1e-3, gt=0.0)
    buffer_capacity: int = Field(200, ge=1)
    smoothing_width: int = Field(1, ge=1)
    reject_ratio: float = Field(10.0, gt=1.0)

    @model_validator(mode="after")
    def _batch_fits(self) -> "AdaptConfig":
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must not exceed buffer_capacity")
        return self


class MetaConfig(_Block):
    inner_lr: float = Field(1e-2, gt=0.0)
    meta_lr: float = Field(1e-3, gt=0.0)
    epochs: int = Field(2000, ge=1)
    k_shot: int = Field(50, ge=1)
    inner_steps: int = Field(1, ge=1)
    second_order: bool = False
    task_batch: Optional[int] = Field(None, ge=1)
    loss: Literal["mae", "mse"] = "mse"
    refresh_every: int = Field(50, ge=1)
    log_every: int = Field(100, ge=1)


# ==================== Simulation / references / metrics ====================

class SimulationConfig(_Block):
    duration: float = Field(10.0, gt=0.0)
    control_period: float = Field(0.02, gt=0.0)
    substep: float = Field(1e-3, gt=0.0)
    noise_sigma: float = Field(0.0, ge=0.0)
    record_timing: bool = True
    prediction_horizon: float = Field(1.0, gt=0.0)

    @model_validator(mode="after")
    def _timing(self) -> "SimulationConfig":
        if not _is_multiple(self.control_period, self.substep):
            raise ValueError("substep must divide control_period")
        if not _is_multiple(self.duration, self.control_period):
            raise ValueError("control_period must divide duration")
        return self


class InitialStateConfig(_Block):
    """Either a fixed x0 or a uniform box [low, high]."""

    fixed: Optional[List[float]] = None
    low: Optional[List[float]] = None
    high: Optional[List[float]] = None

    @model_validator(mode="after")
    def _one_source(self) -> "InitialStateConfig":
        if self.fixed is None and (self.low is None or self.high is None):
            raise ValueError("give either 'fixed' or both 'low' and 'high'")
        if self.fixed is None:
            if len(self.low) != len(self.high) or any(lo > hi for lo, hi in zip(self.low, self.high)):
                raise ValueError("low/high must have equal length and satisfy low <= high")
        return self


class ReferenceConfig(_Block):
    kind: Literal["constant", "circle"] = "constant"
    x_ref: Optional[List[float]] = None
    u_ref: Optional[List[float]] = None
    center: Tuple[float, float] = (0.0, 1.0)
    radius: float = Field(0.5, ge=0.0)
    period: float = Field(15.0, gt=0.0)


class MetricsConfig(_Block):
    position_tol: float = Field(0.1, gt=0.0)
    angle_tol: float = Field(0.05, gt=0.0)
    velocity_tol: float = Field(0.1, gt=0.0)
    error_threshold: float = Field(0.05, gt=0.0)
    reach_deadline: float = Field(4.0, gt=0.0)
    bin_width: float = Field(0.5, gt=0.0)
    steady_state_window: float = Field(1.0, gt=0.0)
    windows: Dict[str, Tuple[float, float]] = Field(default_factory=dict)


class PaperScaleConfig(_Block):
    trials: Optional[int] = Field(None, ge=1)
    meta_epochs: Optional[int] = Field(None, ge=1)


class FewShotConfig(_Block):
    held_out: int = Field(10, ge=1)
    seeds: int = Field(10, ge=1)


# ==================== Top level ====================

class ExperimentConfig(_Block):
    experiment: ExperimentKind
    plant: PlantConfig
    model: ModelConfig = Field(default_factory=ModelConfig)
    tasks: TaskConfig = Field(default_factory=TaskConfig)
    controllers: List[ControllerKind] = Field(default_factory=lambda: list(CONTROLLER_KINDS))
    ocp: OcpConfig = Field(default_factory=OcpConfig)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    meta: MetaConfig = Field(default_factory=MetaConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    initial_state: Optional[InitialStateConfig] = None
    reference: ReferenceConfig = Field(default_factory=ReferenceConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    paper_scale: PaperScaleConfig = Field(default_factory=PaperScaleConfig)
    few_shot: FewShotConfig = Field(default_factory=FewShotConfig)
    checkpoint: Optional[str] = None
    trials: int = Field(10, ge=1)
    seed: int = 0
    output_dir: str = DEFAULT_OUTPUT_DIR

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if not _is_multiple(self.adapt.update_period, self.simulation.control_period):
            raise ValueError("adapt.update_period must be a multiple of simulation.control_period")
        if self.experiment in ("vdp_predict", "cartpole_stab", "quad_stab", "quad_track", "few_shot_eval"):
            if "meta_mlp" in self.controllers or self.experiment == "few_shot_eval":
                if not self.checkpoint:
                    raise ValueError("a meta checkpoint path is required for meta_mlp runs")
        if self.experiment == "meta_train" and not self.checkpoint:
            raise ValueError("meta_train needs a checkpoint path to write")
        return self


PathLike = Union[str, Path]


def load_experiment_config(path: PathLike) -> ExperimentConfig:
    """Read and validate one experiment JSON document."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError("Config file not found", {"path": str(path)})
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config is not valid JSON: {e}", {"path": str(path)}) from e

    try:
        cfg = ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}", {"path": str(path)}) from e

    logger.info(f"Loaded {cfg.experiment} config from {path}")
    return cfg


def apply_overrides(
    cfg: ExperimentConfig,
    paper_scale: bool = False,
    trials: Optional[int] = None,
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """CLI overrides; --trials wins over --paper-scale."""
    update: dict = {}
    if paper_scale:
        if cfg.paper_scale.trials is not None:
            update["trials"] = cfg.paper_scale.trials
        if cfg.paper_scale.meta_epochs is not None:
            update["meta"] = cfg.meta.model_copy(update={"epochs": cfg.paper_scale.meta_epochs})
    if trials is not None:
        if trials < 1:
            raise ConfigurationError("--trials must be >= 1", {"trials": trials})
        update["trials"] = trials
    if seed is not None:
        update["seed"] = seed
    return cfg.model_copy(update=update) if update else cfg


def write_resolved_config(cfg: ExperimentConfig, output_dir: PathLike) -> Path:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / "config.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.model_dump(mode="json", by_alias=True), f, indent=2, sort_keys=True)
    return path


def read_resolved_config(output_dir: PathLike) -> ExperimentConfig:
    return load_experiment_config(Path(output_dir) / "config.json")
