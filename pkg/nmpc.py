"""
nmpc.py - Multiple-shooting NMPC over the (augmented) dynamics model

Gauss-Newton SQP: RK4 linearization at every shooting node, a backward
Riccati pass with the feedforward projected onto the input box, and a
forward pass that re-simulates the clamped feedback law under a
backtracking line search. Every accepted iterate is a nonlinear rollout,
so shooting gaps are closed.
"""

import logging
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from config import OcpConfig
from dynamics import DoubleArray, DynamicsModel, ReferenceSignal, reference_window, rk4_sensitivities, rk4_step
from errors import NumericError, ShapeError, SolverError

logger = logging.getLogger(__name__)


# ==================== Costs ====================

def stage_cost(
    x: DoubleArray,
    u: DoubleArray,
    x_ref: DoubleArray,
    u_ref: DoubleArray,
    Q: DoubleArray,
    R: DoubleArray,
) -> float:
    """||x - x_ref||^2_Q + ||u - u_ref||^2_R with diagonal Q and R."""
    dx = np.asarray(x, float) - np.asarray(x_ref, float)
    du = np.asarray(u, float) - np.asarray(u_ref, float)
    return float(np.sum(np.asarray(Q, float) * dx * dx) + np.sum(np.asarray(R, float) * du * du))


def terminal_cost(x_n: DoubleArray, x_ref_n: DoubleArray, Q: DoubleArray) -> float:
    dx = np.asarray(x_n, float) - np.asarray(x_ref_n, float)
    return float(np.sum(np.asarray(Q, float) * dx * dx))


def _trajectory_cost(
    states: DoubleArray,
    controls: DoubleArray,
    x_refs: DoubleArray,
    u_refs: DoubleArray,
    Q: DoubleArray,
    R: DoubleArray,
) -> float:
    dx = states - x_refs
    du = controls - u_refs[:-1]
    return float(np.sum(Q * dx * dx) + np.sum(R * du * du))


# ==================== Solution types ====================

@dataclass(frozen=True, eq=False)
class OcpSolution:
    """Best iterate of one solve; cost_history holds the initial and every accepted cost."""

    states: DoubleArray
    controls: DoubleArray
    cost: float
    iters: int
    converged: bool
    solve_time: float
    cost_history: Tuple[float, ...] = ()

    def shifted_controls(self) -> DoubleArray:
        """Warm-start guess: drop the first control and repeat the last one."""
        if len(self.controls) == 0:
            return self.controls.copy()
        return np.concatenate([self.controls[1:], self.controls[-1:]], axis=0)


@dataclass(frozen=True)
class _Problem:
    model: DynamicsModel
    x0: DoubleArray
    x_refs: DoubleArray
    u_refs: DoubleArray
    Q: DoubleArray
    R: DoubleArray
    lower: DoubleArray
    upper: DoubleArray
    dt: float

    @property
    def steps(self) -> int:
        return len(self.x_refs) - 1


def _setup(
    model: DynamicsModel,
    x0: DoubleArray,
    x_refs: DoubleArray,
    u_refs: DoubleArray,
    cfg: OcpConfig,
) -> _Problem:
    n, m = model.state_dim, model.input_dim
    x0 = np.asarray(x0, dtype=np.float64)
    x_refs = np.asarray(x_refs, dtype=np.float64)
    u_refs = np.asarray(u_refs, dtype=np.float64).reshape(len(x_refs), m)

    if x0.shape != (n,):
        raise ShapeError("x0 does not match the model state", {"expected": n, "got": x0.shape})
    if not np.all(np.isfinite(x0)):
        raise NumericError("x0 is not finite", {"x0": x0.tolist()})
    if x_refs.shape != (cfg.steps + 1, n):
        raise ShapeError("Reference window must hold N+1 states", {"expected": (cfg.steps + 1, n), "got": x_refs.shape})
    if len(cfg.Q) != n or len(cfg.R) != m:
        raise ShapeError("Q/R do not match the model", {"Q": len(cfg.Q), "R": len(cfg.R), "n": n, "m": m})

    if cfg.bounds is None:
        lower, upper = np.full(m, -np.inf), np.full(m, np.inf)
    else:
        if len(cfg.bounds) != m:
            raise ShapeError("One bound pair per input channel is required", {"m": m, "got": len(cfg.bounds)})
        lower = np.array([lo for lo, _ in cfg.bounds], dtype=np.float64)
        upper = np.array([hi for _, hi in cfg.bounds], dtype=np.float64)

    return _Problem(model, x0, x_refs, u_refs, np.asarray(cfg.Q, float), np.asarray(cfg.R, float),
                    lower, upper, cfg.dt)


# ==================== SQP building blocks ====================

def _rollout(problem: _Problem, controls: DoubleArray) -> DoubleArray:
    states = np.empty((problem.steps + 1, problem.model.state_dim))
    states[0] = problem.x0
    for k in range(problem.steps):
        states[k + 1] = rk4_step(problem.model.derivative, states[k], controls[k], problem.dt)
    return states


def _box_feedforward(
    Quu: DoubleArray,
    Qu: DoubleArray,
    lower: DoubleArray,
    upper: DoubleArray,
) -> Tuple[DoubleArray, DoubleArray]:
    """Minimize 0.5 d'Quu d + Qu'd over lower <= d <= upper; return (d, free mask).

    Active-set iteration: channels pinned at a bound with an outward-pointing
    gradient are fixed, the rest re-solved with the pinned values substituted.
    """
    m = len(Qu)
    free = np.ones(m, dtype=bool)
    d = np.zeros(m)
    for _ in range(m + 1):
        d_new = d.copy()
        if free.any():
            rhs = Qu[free] + Quu[np.ix_(free, ~free)] @ d[~free]
            d_new[free] = -np.linalg.solve(Quu[np.ix_(free, free)], rhs)
        d_new = np.clip(d_new, lower, upper)

        grad = Quu @ d_new + Qu
        at_lower = (d_new <= lower) & (grad > 0.0)
        at_upper = (d_new >= upper) & (grad < 0.0)
        new_free = ~(at_lower | at_upper)
        d = d_new
        if np.array_equal(new_free, free):
            break
        free = new_free
    return d, free


def _backward_pass(
    problem: _Problem,
    states: DoubleArray,
    controls: DoubleArray,
    A: DoubleArray,
    B: DoubleArray,
    reg_lambda: float,
) -> Tuple[DoubleArray, DoubleArray]:
    """Riccati recursion on the Gauss-Newton subproblem; returns (k, K) per node."""
    n, m, N = problem.model.state_dim, problem.model.input_dim, problem.steps
    Qd = np.diag(problem.Q)
    Rd = np.diag(problem.R)

    Vx = 2.0 * problem.Q * (states[N] - problem.x_refs[N])
    Vxx = 2.0 * Qd

    k_ff = np.zeros((N, m))
    K_fb = np.zeros((N, m, n))
    for k in reversed(range(N)):
        Ak, Bk = A[k], B[k]
        Qx = 2.0 * problem.Q * (states[k] - problem.x_refs[k]) + Ak.T @ Vx
        Qu = 2.0 * problem.R * (controls[k] - problem.u_refs[k]) + Bk.T @ Vx
        Qxx = 2.0 * Qd + Ak.T @ Vxx @ Ak
        Quu = 2.0 * Rd + Bk.T @ Vxx @ Bk + reg_lambda * np.eye(m)
        Qux = Bk.T @ Vxx @ Ak

        d, free = _box_feedforward(Quu, Qu, problem.lower - controls[k], problem.upper - controls[k])
        gain = np.zeros((m, n))
        if free.any():
            gain[free] = -np.linalg.solve(Quu[np.ix_(free, free)], Qux[free])

        k_ff[k] = d
        K_fb[k] = gain

        Vx = Qx + gain.T @ Quu @ d + gain.T @ Qu + Qux.T @ d
        Vxx = Qxx + gain.T @ Quu @ gain + gain.T @ Qux + Qux.T @ gain
        Vxx = 0.5 * (Vxx + Vxx.T)

    if not (np.all(np.isfinite(k_ff)) and np.all(np.isfinite(K_fb))):
        raise SolverError("Riccati pass produced non-finite gains")
    return k_ff, K_fb


def _forward_pass(
    problem: _Problem,
    states: DoubleArray,
    controls: DoubleArray,
    k_ff: DoubleArray,
    K_fb: DoubleArray,
    alpha: float,
) -> Tuple[DoubleArray, DoubleArray]:
    new_states = np.empty_like(states)
    new_controls = np.empty_like(controls)
    new_states[0] = problem.x0
    for k in range(problem.steps):
        u = controls[k] + alpha * k_ff[k] + K_fb[k] @ (new_states[k] - states[k])
        new_controls[k] = np.clip(u, problem.lower, problem.upper)
        new_states[k + 1] = rk4_step(problem.model.derivative, new_states[k], new_controls[k], problem.dt)
    return new_states, new_controls


# ==================== Solver ====================

def solve_ocp(
    model: DynamicsModel,
    x0: DoubleArray,
    x_refs: DoubleArray,
    u_refs: DoubleArray,
    cfg: OcpConfig,
    warm: Optional[OcpSolution] = None,
) -> OcpSolution:
    """Solve the finite-horizon tracking OCP from x0.

    Args:
        model: dynamics used for prediction (nominal or augmented)
        x0: measured state
        x_refs, u_refs: N+1 reference states and inputs
        cfg: horizon, weights, bounds and SQP settings
        warm: previous solution, shifted by one step to seed the iteration

    Returns:
        OcpSolution; converged is False when the line search stalls or the
        iteration cap is hit, in which case the best iterate is returned.
    """
    started = time.perf_counter()
    problem = _setup(model, x0, x_refs, u_refs, cfg)

    if warm is not None and warm.controls.shape == (problem.steps, model.input_dim):
        controls = warm.shifted_controls()
    else:
        controls = problem.u_refs[:-1].copy()
    controls = np.clip(controls, problem.lower, problem.upper)

    try:
        states = _rollout(problem, controls)
    except NumericError as e:
        raise SolverError("Initial rollout is not finite", {"iter": 0}) from e
    cost = _trajectory_cost(states, controls, problem.x_refs, problem.u_refs, problem.Q, problem.R)
    history = [cost]

    alphas = [0.5 ** i for i in range(cfg.line_search_halvings + 1)]
    converged = False
    iters = 0
    for iters in range(1, cfg.sqp_max_iters + 1):
        try:
            _, A, B = rk4_sensitivities(model, states[:-1], controls, problem.dt)
        except NumericError as e:
            raise SolverError("Linearization is not finite", {"iter": iters}) from e
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise SolverError("Linearization is not finite", {"iter": iters})

        try:
            k_ff, K_fb = _backward_pass(problem, states, controls, A, B, cfg.reg_lambda)
        except np.linalg.LinAlgError as e:
            raise SolverError("Riccati pass hit a singular input Hessian", {"iter": iters}) from e
        if float(np.max(np.abs(k_ff), initial=0.0)) < cfg.sqp_tol:
            converged = True
            break

        accepted = False
        for alpha in alphas:
            try:
                trial_states, trial_controls = _forward_pass(problem, states, controls, k_ff, K_fb, alpha)
            except NumericError:
                continue
            trial_cost = _trajectory_cost(trial_states, trial_controls, problem.x_refs, problem.u_refs,
                                          problem.Q, problem.R)
            if trial_cost <= cost:
                accepted = True
                break

        if not accepted:
            logger.debug(f"Line search stalled at iteration {iters} (cost {cost:.6g})")
            break

        step = float(np.max(np.abs(trial_controls - controls), initial=0.0))
        states, controls, cost = trial_states, trial_controls, trial_cost
        history.append(cost)
        if step < cfg.sqp_tol:
            converged = True
            break

    return OcpSolution(
        states=states,
        controls=controls,
        cost=cost,
        iters=iters,
        converged=converged,
        solve_time=time.perf_counter() - started,
        cost_history=tuple(history),
    )


def discrete_lqr_gain(
    A_d: DoubleArray,
    B_d: DoubleArray,
    Q: DoubleArray,
    R: DoubleArray,
    tol: float = 1e-10,
    max_iters: int = 10000,
) -> DoubleArray:
    """Infinite-horizon gain K (u = -K x) by fixed-point iteration of the DARE."""
    Qm = np.diag(np.asarray(Q, float))
    Rm = np.diag(np.asarray(R, float))
    P = Qm.copy()
    for _ in range(max_iters):
        S = Rm + B_d.T @ P @ B_d
        K = np.linalg.solve(S, B_d.T @ P @ A_d)
        P_next = Qm + A_d.T @ P @ (A_d - B_d @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) < tol * max(1.0, np.max(np.abs(P))):
            P = P_next
            break
        if not np.all(np.isfinite(P_next)):
            raise NumericError("DARE iteration diverged")
        P = P_next
    return np.linalg.solve(Rm + B_d.T @ P @ B_d, B_d.T @ P @ A_d)


# ==================== Receding horizon ====================

@dataclass(frozen=True, eq=False)
class MpcStepResult:
    control: DoubleArray
    solution: Optional[OcpSolution]
    held: bool


@dataclass
class MpcController:
    """Receding-horizon controller holding the warm-start state.

    The model is replaced only through swap_model between steps.
    """

    model: DynamicsModel
    cfg: OcpConfig
    reference: ReferenceSignal
    last_solution: Optional[OcpSolution] = None
    last_control: Optional[DoubleArray] = None
    holds: int = 0

    def swap_model(self, model: DynamicsModel) -> None:
        self.model = model

    def _fallback_control(self) -> DoubleArray:
        if self.last_control is not None:
            return self.last_control.copy()
        _, u_ref = reference_window(self.reference, 0.0, self.cfg.dt, 0)
        u = u_ref[0]
        if self.cfg.bounds is not None:
            u = np.clip(u, [lo for lo, _ in self.cfg.bounds], [hi for _, hi in self.cfg.bounds])
        return u

    def step(self, t: float, x_measured: DoubleArray) -> MpcStepResult:
        return mpc_step(self, t, x_measured)


def mpc_step(controller: MpcController, t: float, x_measured: DoubleArray) -> MpcStepResult:
    """Solve from the measured state and return the first control.

    A SolverError holds the last applied control; the event is counted and flagged.
    """
    cfg = controller.cfg
    x_refs, u_refs = reference_window(controller.reference, t, cfg.dt, cfg.steps)
    try:
        solution = solve_ocp(controller.model, x_measured, x_refs, u_refs, cfg, controller.last_solution)
    except SolverError as e:
        controller.holds += 1
        controller.last_solution = None
        held = controller._fallback_control()
        logger.warning(f"Solver failed at t={t:.3f}s, holding last input: {e}")
        controller.last_control = held
        return MpcStepResult(control=held, solution=None, held=True)

    controller.last_solution = solution
    controller.last_control = solution.controls[0].copy()
    return MpcStepResult(control=solution.controls[0].copy(), solution=solution, held=False)
