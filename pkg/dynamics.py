"""
dynamics.py - Plants, residual-augmented model, RK4 integration and task sampling

State layout is interleaved [pos_0, vel_0, pos_1, vel_1, ...], so velocity
rows of the state derivative are 0::2 and acceleration rows are 1::2.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from errors import ConfigurationError, NumericError, ShapeError
from numcore import MlpModel, mlp_forward, mlp_input_jacobian

logger = logging.getLogger(__name__)

DoubleArray = npt.NDArray[np.float64]

GRAVITY = 9.81
QUAD_ARM = 0.04
DIVERGENCE_NORM = 1e6

PLANT_KINDS = ("van_der_pol", "cart_pole", "quad_2d")

# (state_dim, input_dim)
PLANT_DIMS: Dict[str, Tuple[int, int]] = {
    "van_der_pol": (2, 0),
    "cart_pole": (4, 1),
    "quad_2d": (6, 2),
}

PARAM_KEYS: Dict[str, Tuple[str, ...]] = {
    "van_der_pol": ("mu",),
    "cart_pole": ("m_c", "m_p", "l", "g"),
    "quad_2d": ("m", "I_yy", "d", "g"),
}

DEFAULT_TRUE_PARAMS: Dict[str, Dict[str, float]] = {
    "van_der_pol": {"mu": 0.2},
    "cart_pole": {"m_c": 1.0, "m_p": 0.1, "l": 0.5, "g": GRAVITY},
    "quad_2d": {"m": 0.027, "I_yy": 1.4e-5, "d": QUAD_ARM, "g": GRAVITY},
}

DEFAULT_INPUT_BOUNDS: Dict[str, Tuple[Tuple[float, float], ...]] = {
    "van_der_pol": (),
    "cart_pole": ((-10.0, 10.0),),
    "quad_2d": ((0.0, 0.3), (0.0, 0.3)),
}

# Parameters varied per task when the caller does not say otherwise
DEFAULT_SCALED_PARAMS: Dict[str, Tuple[str, ...]] = {
    "van_der_pol": ("mu",),
    "cart_pole": ("m_c", "m_p"),
    "quad_2d": ("m", "I_yy"),
}


# ==================== Plant and task types ====================

@dataclass(frozen=True)
class PlantSpec:
    """One plant kind with its true and nominal parameter maps."""

    kind: str
    true_params: Mapping[str, float]
    nominal_params: Mapping[str, float]
    input_bounds: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in PLANT_KINDS:
            raise ConfigurationError(f"Unknown plant kind '{self.kind}'", {"allowed": PLANT_KINDS})
        keys = set(PARAM_KEYS[self.kind])
        for label, params in (("true_params", self.true_params), ("nominal_params", self.nominal_params)):
            if set(params) != keys:
                raise ConfigurationError(
                    f"{label} must contain exactly {sorted(keys)}",
                    {"kind": self.kind, "got": sorted(params)},
                )
            for key, value in params.items():
                if not math.isfinite(value):
                    raise ConfigurationError(f"{label}[{key}] is not finite")
                if key != "mu" and value <= 0.0:
                    raise ConfigurationError(f"{label}[{key}] must be strictly positive", {"value": value})

        bounds = tuple((float(lo), float(hi)) for lo, hi in self.input_bounds)
        if len(bounds) != self.input_dim:
            raise ConfigurationError(
                "Input bounds must have one [u_min, u_max] pair per input channel",
                {"kind": self.kind, "input_dim": self.input_dim, "got": len(bounds)},
            )
        if any(lo > hi for lo, hi in bounds):
            raise ConfigurationError("Input bounds must satisfy u_min <= u_max", {"bounds": bounds})

        object.__setattr__(self, "true_params", dict(self.true_params))
        object.__setattr__(self, "nominal_params", dict(self.nominal_params))
        object.__setattr__(self, "input_bounds", bounds)

    @property
    def state_dim(self) -> int:
        return PLANT_DIMS[self.kind][0]

    @property
    def input_dim(self) -> int:
        return PLANT_DIMS[self.kind][1]

    @property
    def pos_dim(self) -> int:
        return self.state_dim // 2

    @property
    def lower_bounds(self) -> DoubleArray:
        return np.array([lo for lo, _ in self.input_bounds], dtype=np.float64)

    @property
    def upper_bounds(self) -> DoubleArray:
        return np.array([hi for _, hi in self.input_bounds], dtype=np.float64)


def make_plant(
    kind: str,
    true_params: Optional[Mapping[str, float]] = None,
    nominal_scale: Optional[Mapping[str, float]] = None,
    input_bounds: Optional[Sequence[Sequence[float]]] = None,
    nominal_params: Optional[Mapping[str, float]] = None,
) -> PlantSpec:
    """Build a PlantSpec; the nominal side defaults to true params times nominal_scale."""
    if kind not in PLANT_KINDS:
        raise ConfigurationError(f"Unknown plant kind '{kind}'", {"allowed": PLANT_KINDS})

    true = dict(DEFAULT_TRUE_PARAMS[kind])
    true.update(true_params or {})

    if nominal_params is None:
        scale = dict(nominal_scale or {})
        unknown = set(scale) - set(PARAM_KEYS[kind])
        if unknown:
            raise ConfigurationError("nominal_scale names unknown parameters", {"unknown": sorted(unknown)})
        nominal_params = {key: value * scale.get(key, 1.0) for key, value in true.items()}

    bounds = DEFAULT_INPUT_BOUNDS[kind] if input_bounds is None else tuple(tuple(b) for b in input_bounds)
    return PlantSpec(kind, true, dict(nominal_params), bounds)


@dataclass(frozen=True)
class PlantTask:
    """A task: the plant with perturbed true parameters; nominal parameters are shared."""

    base: PlantSpec
    task_id: str
    scale_factors: Mapping[str, float] = field(default_factory=dict)


# ==================== Analytic plant models ====================

def _vdp_derivative(p: Mapping[str, float], x: DoubleArray, u: DoubleArray) -> DoubleArray:
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x2, p["mu"] * (1.0 - x1 * x1) * x2 - x1], axis=-1)


def _vdp_jacobians(p: Mapping[str, float], x: DoubleArray, u: DoubleArray) -> Tuple[DoubleArray, DoubleArray]:
    x1, x2 = x[..., 0], x[..., 1]
    A = np.zeros(x.shape[:-1] + (2, 2))
    A[..., 0, 1] = 1.0
    A[..., 1, 0] = -2.0 * p["mu"] * x1 * x2 - 1.0
    A[..., 1, 1] = p["mu"] * (1.0 - x1 * x1)
    B = np.zeros(x.shape[:-1] + (2, 0))
    return A, B


def _cart_pole_terms(p: Mapping[str, float], x: DoubleArray, u: DoubleArray) -> dict:
    """Shared intermediate terms; theta_dd is solved first, then p_dd."""
    m_p, l, g = p["m_p"], p["l"], p["g"]
    total = p["m_c"] + m_p
    theta, omega, force = x[..., 2], x[..., 3], u[..., 0]
    s, c = np.sin(theta), np.cos(theta)

    temp = (force + m_p * l * omega * omega * s) / total
    num = g * s - c * temp
    den = l * (4.0 / 3.0 - m_p * c * c / total)
    theta_dd = num / den
    p_dd = temp - m_p * l * theta_dd * c / total
    return dict(m_p=m_p, l=l, g=g, total=total, omega=omega, s=s, c=c,
                temp=temp, num=num, den=den, theta_dd=theta_dd, p_dd=p_dd)


def _cart_pole_derivative(p: Mapping[str, float], x: DoubleArray, u: DoubleArray) -> DoubleArray:
    t = _cart_pole_terms(p, x, u)
    return np.stack([x[..., 1], t["p_dd"], x[..., 3], t["theta_dd"]], axis=-1)


def _cart_pole_jacobians(p: Mapping[str, float], x: DoubleArray, u: DoubleArray) -> Tuple[DoubleArray, DoubleArray]:
    t = _cart_pole_terms(p, x, u)
    m_p, l, g, total = t["m_p"], t["l"], t["g"], t["total"]
    omega, s, c = t["omega"], t["s"], t["c"]
    temp, num, den, theta_dd = t["temp"], t["num"], t["den"], t["theta_dd"]

    dtemp_dtheta = m_p * l * omega * omega * c / total
    dtemp_domega = 2.0 * m_p * l * omega * s / total
    dtemp_dforce = 1.0 / total

    dnum_dtheta = g * c + s * temp - c * dtemp_dtheta
    dnum_domega = -c * dtemp_domega
    dnum_dforce = -c * dtemp_dforce
    dden_dtheta = l * 2.0 * m_p * c * s / total

    dthdd_dtheta = (dnum_dtheta * den - num * dden_dtheta) / (den * den)
    dthdd_domega = dnum_domega / den
    dthdd_dforce = dnum_dforce / den

    k = m_p * l / total
    dpdd_dtheta = dtemp_dtheta - k * (dthdd_dtheta * c - theta_dd * s)
    dpdd_domega = dtemp_domega - k * c * dthdd_domega
    dpdd_dforce = dtemp_dforce - k * c * dthdd_dforce

    A = np.zeros(x.shape[:-1] + (4, 4))
    A[..., 0, 1] = 1.0
    A[..., 1, 2] = dpdd_dtheta
    A[..., 1, 3] = dpdd_domega
    A[..., 2, 3] = 1.0
    A[..., 3, 2] = dthdd_dtheta
    A[..., 3, 3] = dthdd_domega

    B = np.zeros(x.shape[:-1] + (4, 1))
    B[..., 1, 0] = dpdd_dforce
    B[..., 3, 0] = dthdd_dforce
    return A, B


def _quad_derivative(p: Mapping[str, float], x: DoubleArray, u: DoubleArray) -> DoubleArray:
    theta = x[..., 4]
    thrust = u[..., 0] + u[..., 1]
    return np.stack([
        x[..., 1],
        np.sin(theta) * thrust / p["m"],
        x[..., 3],
        np.cos(theta) * thrust / p["m"] - p["g"],
        x[..., 5],
        (u[..., 1] - u[..., 0]) * p["d"] / p["I_yy"],
    ], axis=-1)


def _quad_jacobians(p: Mapping[str, float], x: DoubleArray, u: DoubleArray) -> Tuple[DoubleArray, DoubleArray]:
    theta = x[..., 4]
    s, c = np.sin(theta), np.cos(theta)
    thrust = u[..., 0] + u[..., 1]
    m, arm = p["m"], p["d"] / p["I_yy"]

    A = np.zeros(x.shape[:-1] + (6, 6))
    A[..., 0, 1] = 1.0
    A[..., 1, 4] = c * thrust / m
    A[..., 2, 3] = 1.0
    A[..., 3, 4] = -s * thrust / m
    A[..., 4, 5] = 1.0

    B = np.zeros(x.shape[:-1] + (6, 2))
    B[..., 1, 0] = s / m
    B[..., 1, 1] = s / m
    B[..., 3, 0] = c / m
    B[..., 3, 1] = c / m
    B[..., 5, 0] = -arm
    B[..., 5, 1] = arm
    return A, B


_DERIVATIVES: Dict[str, Callable] = {
    "van_der_pol": _vdp_derivative,
    "cart_pole": _cart_pole_derivative,
    "quad_2d": _quad_derivative,
}

_JACOBIANS: Dict[str, Callable] = {
    "van_der_pol": _vdp_jacobians,
    "cart_pole": _cart_pole_jacobians,
    "quad_2d": _quad_jacobians,
}


def _check_state_input(spec: PlantSpec, x: DoubleArray, u: DoubleArray) -> Tuple[DoubleArray, DoubleArray]:
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape[-1:] != (spec.state_dim,):
        raise ShapeError("State dimension mismatch", {"kind": spec.kind, "expected": spec.state_dim, "got": x.shape})
    if u.shape[-1:] != (spec.input_dim,):
        raise ShapeError("Input dimension mismatch", {"kind": spec.kind, "expected": spec.input_dim, "got": u.shape})
    return x, u


def plant_derivative(spec: PlantSpec, params: Mapping[str, float], x: DoubleArray, u: DoubleArray) -> DoubleArray:
    x, u = _check_state_input(spec, x, u)
    return _DERIVATIVES[spec.kind](params, x, u)


def plant_jacobians(
    spec: PlantSpec,
    params: Mapping[str, float],
    x: DoubleArray,
    u: DoubleArray,
) -> Tuple[DoubleArray, DoubleArray]:
    x, u = _check_state_input(spec, x, u)
    return _JACOBIANS[spec.kind](params, x, u)


def eval_true(spec: PlantSpec, x: DoubleArray, u: DoubleArray) -> DoubleArray:
    """State derivative under the true parameters."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("Non-finite state passed to the true plant", {"kind": spec.kind})
    return plant_derivative(spec, spec.true_params, x, u)


def eval_nominal(spec: PlantSpec, x: DoubleArray, u: DoubleArray) -> DoubleArray:
    return plant_derivative(spec, spec.nominal_params, x, u)


def true_residual(spec: PlantSpec, x: DoubleArray, u: DoubleArray) -> DoubleArray:
    """Analytic acceleration gap (true minus nominal) at (x, u)."""
    return (eval_true(spec, x, u) - eval_nominal(spec, x, u))[..., 1::2]


def hover_thrust(spec: PlantSpec, nominal: bool = True) -> DoubleArray:
    """Per-motor thrust balancing gravity for the quadrotor."""
    if spec.kind != "quad_2d":
        raise ConfigurationError("Hover thrust is only defined for quad_2d", {"kind": spec.kind})
    params = spec.nominal_params if nominal else spec.true_params
    share = params["m"] * params["g"] / 2.0
    return np.array([share, share])


# ==================== Residual-augmented model ====================

class DynamicsModel(Protocol):
    """Anything the integrator and the OCP solver can evaluate and linearize."""

    @property
    def state_dim(self) -> int: ...

    @property
    def input_dim(self) -> int: ...

    def derivative(self, x: DoubleArray, u: DoubleArray) -> DoubleArray: ...

    def linearize(self, x: DoubleArray, u: DoubleArray) -> Tuple[DoubleArray, DoubleArray, DoubleArray]: ...


@dataclass(frozen=True, eq=False)
class AugmentedModel:
    """Nominal dynamics plus an optional MLP correction on the acceleration rows."""

    spec: PlantSpec
    residual: Optional[MlpModel] = None

    def __post_init__(self) -> None:
        if self.residual is None:
            return
        expected_in = self.spec.state_dim + self.spec.input_dim
        if self.residual.input_dim != expected_in or self.residual.output_dim != self.spec.pos_dim:
            raise ConfigurationError(
                "Residual network does not match the plant",
                {
                    "kind": self.spec.kind,
                    "expected": (expected_in, self.spec.pos_dim),
                    "got": (self.residual.input_dim, self.residual.output_dim),
                },
            )

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    def with_residual(self, residual: Optional[MlpModel]) -> "AugmentedModel":
        return AugmentedModel(self.spec, residual)

    def derivative(self, x: DoubleArray, u: DoubleArray) -> DoubleArray:
        return eval_augmented(self, x, u)

    def linearize(self, x: DoubleArray, u: DoubleArray) -> Tuple[DoubleArray, DoubleArray, DoubleArray]:
        return _augmented_linearization(self, x, u)


def _residual_input(x: DoubleArray, u: DoubleArray) -> DoubleArray:
    if u.shape[-1] == 0:
        return x
    lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    return np.concatenate([np.broadcast_to(x, lead + x.shape[-1:]), np.broadcast_to(u, lead + u.shape[-1:])], axis=-1)


def eval_augmented(model: AugmentedModel, x: DoubleArray, u: DoubleArray) -> DoubleArray:
    """Nominal derivative with f_NN(x, u) added to the acceleration rows."""
    f = eval_nominal(model.spec, x, u)
    if model.residual is not None:
        f[..., 1::2] += mlp_forward(model.residual, _residual_input(np.asarray(x, float), np.asarray(u, float)))
    return f


def _augmented_linearization(
    model: AugmentedModel,
    x: DoubleArray,
    u: DoubleArray,
) -> Tuple[DoubleArray, DoubleArray, DoubleArray]:
    f = eval_augmented(model, x, u)
    A, B = plant_jacobians(model.spec, model.spec.nominal_params, x, u)
    if model.residual is not None:
        n = model.spec.state_dim
        jac = mlp_input_jacobian(model.residual, _residual_input(np.asarray(x, float), np.asarray(u, float)))
        A[..., 1::2, :] += jac[..., :, :n]
        B[..., 1::2, :] += jac[..., :, n:]
    return f, A, B


def eval_augmented_jacobians(model: AugmentedModel, x: DoubleArray, u: DoubleArray) -> Tuple[DoubleArray, DoubleArray]:
    """Continuous-time (df/dx, df/du) of the augmented model."""
    _, A, B = _augmented_linearization(model, x, u)
    return A, B


@dataclass(frozen=True, eq=False)
class LinearModel:
    """xdot = A x + B u; used for solver oracles and LQR excitation."""

    A: DoubleArray
    B: DoubleArray

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    def derivative(self, x: DoubleArray, u: DoubleArray) -> DoubleArray:
        return np.asarray(x, float) @ self.A.T + np.asarray(u, float) @ self.B.T

    def linearize(self, x: DoubleArray, u: DoubleArray) -> Tuple[DoubleArray, DoubleArray, DoubleArray]:
        x = np.asarray(x, float)
        lead = x.shape[:-1]
        return (
            self.derivative(x, u),
            np.broadcast_to(self.A, lead + self.A.shape).copy(),
            np.broadcast_to(self.B, lead + self.B.shape).copy(),
        )


# ==================== Integration ====================

Derivative = Callable[[DoubleArray, DoubleArray], DoubleArray]


def rk4_step(derivative: Derivative, x: DoubleArray, u: DoubleArray, dt: float) -> DoubleArray:
    """Classical RK4 with u held constant over the step."""
    if not dt > 0.0:
        raise ConfigurationError("Integration step must be positive", {"dt": dt})
    x = np.asarray(x, dtype=np.float64)
    k1 = derivative(x, u)
    k2 = derivative(x + 0.5 * dt * k1, u)
    k3 = derivative(x + 0.5 * dt * k2, u)
    k4 = derivative(x + dt * k3, u)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NumericError("RK4 step produced non-finite state", {"dt": dt})
    return x_next


def rk4_sensitivities(
    model: DynamicsModel,
    x: DoubleArray,
    u: DoubleArray,
    dt: float,
) -> Tuple[DoubleArray, DoubleArray, DoubleArray]:
    """One RK4 step and its exact Jacobians (dx+/dx, dx+/du); works on stacks of nodes."""
    if not dt > 0.0:
        raise ConfigurationError("Integration step must be positive", {"dt": dt})
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    eye = np.eye(model.state_dim)
    h = dt

    k1, A1, B1 = model.linearize(x, u)
    k2, A2, B2 = model.linearize(x + 0.5 * h * k1, u)
    dk2_dx = A2 @ (eye + 0.5 * h * A1)
    dk2_du = A2 @ (0.5 * h * B1) + B2

    k3, A3, B3 = model.linearize(x + 0.5 * h * k2, u)
    dk3_dx = A3 @ (eye + 0.5 * h * dk2_dx)
    dk3_du = A3 @ (0.5 * h * dk2_du) + B3

    k4, A4, B4 = model.linearize(x + h * k3, u)
    dk4_dx = A4 @ (eye + h * dk3_dx)
    dk4_du = A4 @ (h * dk3_du) + B4

    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NumericError("RK4 step produced non-finite state", {"dt": dt})

    A_d = eye + (h / 6.0) * (A1 + 2.0 * dk2_dx + 2.0 * dk3_dx + dk4_dx)
    B_d = (h / 6.0) * (B1 + 2.0 * dk2_du + 2.0 * dk3_du + dk4_du)
    return x_next, A_d, B_d


def step_ratio(total: float, step: float, total_name: str, step_name: str) -> int:
    """Integer count of `step` in `total`, or a configuration error."""
    if not step > 0.0 or not total > 0.0:
        raise ConfigurationError(f"{total_name} and {step_name} must be positive", {total_name: total, step_name: step})
    count = int(round(total / step))
    if count < 1 or abs(count * step - total) > 1e-9 * max(1.0, abs(total)):
        raise ConfigurationError(f"{step_name} must divide {total_name}", {total_name: total, step_name: step})
    return count


def advance_true(spec: PlantSpec, x: DoubleArray, u: DoubleArray, control_period: float, substep: float) -> DoubleArray:
    """Integrate the true plant over one control period with zero-order-hold input."""
    n_sub = step_ratio(control_period, substep, "control_period", "substep")
    h = control_period / n_sub
    f = partial(eval_true, spec)
    u = np.asarray(u, dtype=np.float64)
    for _ in range(n_sub):
        x = rk4_step(f, x, u, h)
    return x


@dataclass(frozen=True, eq=False)
class SimulatedRollout:
    """Open-loop simulation record: samples at every control instant."""

    times: DoubleArray
    true_states: DoubleArray
    measured_states: DoubleArray
    controls: DoubleArray


def add_measurement_noise(states: DoubleArray, noise_sigma: float, rng: np.random.Generator) -> DoubleArray:
    if noise_sigma < 0.0:
        raise ConfigurationError("noise_sigma must be non-negative", {"noise_sigma": noise_sigma})
    if noise_sigma == 0.0:
        return np.array(states, dtype=np.float64, copy=True)
    return states + rng.normal(0.0, noise_sigma, size=np.shape(states))


def simulate_true(
    spec: PlantSpec,
    x0: DoubleArray,
    controls: DoubleArray,
    control_period: float,
    duration: float,
    substep: float = 1e-3,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> SimulatedRollout:
    """Integrate the true plant under a piecewise-constant control schedule."""
    n_steps = step_ratio(duration, control_period, "duration", "control_period")
    step_ratio(control_period, substep, "control_period", "substep")

    controls = np.asarray(controls, dtype=np.float64)
    if controls.size != n_steps * spec.input_dim:
        raise ShapeError("Control schedule must have one input per control period",
                         {"steps": n_steps, "input_dim": spec.input_dim})
    controls = controls.reshape(n_steps, spec.input_dim)

    x = np.asarray(x0, dtype=np.float64)
    states = np.empty((n_steps + 1, spec.state_dim))
    states[0] = x
    for k in range(n_steps):
        x = advance_true(spec, x, controls[k], control_period, substep)
        if np.linalg.norm(x) > DIVERGENCE_NORM:
            raise NumericError("True plant diverged", {"kind": spec.kind, "step": k})
        states[k + 1] = x

    rng = np.random.default_rng(seed)
    return SimulatedRollout(
        times=np.arange(n_steps + 1) * control_period,
        true_states=states,
        measured_states=add_measurement_noise(states, noise_sigma, rng),
        controls=controls,
    )


# ==================== References ====================

@dataclass(frozen=True, eq=False)
class ReferenceSignal:
    """Constant set-point or the circular quadrotor reference."""

    kind: str
    x_ref: DoubleArray
    u_ref: DoubleArray
    center: Tuple[float, float] = (0.0, 1.0)
    radius: float = 0.5
    period: float = 15.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "circle"):
            raise ConfigurationError(f"Unknown reference kind '{self.kind}'")
        if self.kind == "circle":
            if not self.period > 0.0:
                raise ConfigurationError("Circle period must be positive", {"period": self.period})
            if self.radius < 0.0:
                raise ConfigurationError("Circle radius must be non-negative", {"radius": self.radius})
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=np.float64))
        object.__setattr__(self, "u_ref", np.asarray(self.u_ref, dtype=np.float64))

    @classmethod
    def constant(cls, x_ref: Sequence[float], u_ref: Sequence[float]) -> "ReferenceSignal":
        return cls("constant", np.asarray(x_ref, float), np.asarray(u_ref, float))

    @classmethod
    def circle(
        cls,
        u_ref: Sequence[float],
        center: Tuple[float, float] = (0.0, 1.0),
        radius: float = 0.5,
        period: float = 15.0,
    ) -> "ReferenceSignal":
        return cls("circle", np.zeros(6), np.asarray(u_ref, float), tuple(center), float(radius), float(period))


def reference_at(ref: ReferenceSignal, t: float) -> Tuple[DoubleArray, DoubleArray]:
    if ref.kind == "constant":
        return ref.x_ref.copy(), ref.u_ref.copy()

    omega = 2.0 * math.pi / ref.period
    speed = ref.radius * omega
    x_c, z_c = ref.center
    x_ref = np.array([
        x_c + ref.radius * math.cos(omega * t),
        -speed * math.sin(omega * t),
        z_c + ref.radius * math.sin(omega * t),
        speed * math.cos(omega * t),
        0.0,
        0.0,
    ])
    return x_ref, ref.u_ref.copy()


def reference_window(ref: ReferenceSignal, t0: float, dt: float, steps: int) -> Tuple[DoubleArray, DoubleArray]:
    """References at t0, t0 + dt, ..., t0 + steps*dt stacked as (steps+1, .) arrays."""
    pairs = [reference_at(ref, t0 + k * dt) for k in range(steps + 1)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# ==================== Task sampling ====================

def sample_tasks(
    spec: PlantSpec,
    protocol: str,
    count: int = 1,
    value_range: Sequence[float] = (0.75, 2.0),
    seed: int = 0,
    scaled_params: Optional[Sequence[str]] = None,
) -> List[PlantTask]:
    """Task family around the nominal parameters.

    vdp_grid: mu in {0.0, 0.1, ..., 1.0}. scale_range: per-parameter
    multipliers of the nominal values drawn uniformly from value_range.
    """
    if protocol == "vdp_grid":
        if spec.kind != "van_der_pol":
            raise ConfigurationError("vdp_grid protocol needs a van_der_pol plant", {"kind": spec.kind})
        nominal_mu = spec.nominal_params["mu"]
        tasks = []
        for i in range(11):
            mu = i / 10.0
            base = PlantSpec(spec.kind, {"mu": mu}, spec.nominal_params, spec.input_bounds)
            factor = mu / nominal_mu if nominal_mu != 0.0 else float("nan")
            tasks.append(PlantTask(base, f"vdp-mu{mu:.1f}", {"mu": factor}))
        return tasks

    if protocol != "scale_range":
        raise ConfigurationError(f"Unknown task protocol '{protocol}'", {"allowed": ("vdp_grid", "scale_range")})

    lo, hi = (float(v) for v in value_range)
    if not (0.0 < lo <= hi):
        raise ConfigurationError("Task scale range must satisfy 0 < lo <= hi", {"range": [lo, hi]})
    if count < 1:
        raise ConfigurationError("Task count must be >= 1", {"count": count})

    names = tuple(scaled_params) if scaled_params else DEFAULT_SCALED_PARAMS[spec.kind]
    unknown = set(names) - set(PARAM_KEYS[spec.kind])
    if unknown:
        raise ConfigurationError("scaled_params names unknown parameters", {"unknown": sorted(unknown)})

    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(count):
        factors = {name: float(rng.uniform(lo, hi)) for name in names}
        true = {key: value * factors.get(key, 1.0) for key, value in spec.nominal_params.items()}
        base = PlantSpec(spec.kind, true, spec.nominal_params, spec.input_bounds)
        tasks.append(PlantTask(base, f"{spec.kind}-{i:03d}", factors))

    logger.info(f"Sampled {len(tasks)} {spec.kind} tasks, scaling {list(names)} in [{lo}, {hi}]")
    return tasks
