"""
test_nmpc.py - Costs, SQP solver, LQR gain and receding-horizon stepping
"""

import math

import numpy as np
import pytest

from config import OcpConfig
from dynamics import AugmentedModel, LinearModel, ReferenceSignal, hover_thrust, make_plant, rk4_sensitivities, rk4_step
from errors import ShapeError
from nmpc import MpcController, discrete_lqr_gain, mpc_step, solve_ocp, stage_cost, terminal_cost

DOUBLE_INTEGRATOR = LinearModel(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]))


class _NanModel:
    state_dim = 1
    input_dim = 1

    def derivative(self, x, u):
        return np.full_like(np.asarray(x, float), np.nan)

    def linearize(self, x, u):
        x = np.asarray(x, float)
        return self.derivative(x, u), np.zeros(x.shape + (1,)), np.zeros(x.shape + (1,))


def _constant_window(x_ref, u_ref, steps):
    return np.tile(np.asarray(x_ref, float), (steps + 1, 1)), np.tile(np.asarray(u_ref, float), (steps + 1, 1))


# ==================== Costs ====================

def test_stage_cost_examples():
    Q, R = [5.0, 0.1, 5.0, 0.1], [0.1]
    zero = np.zeros(4)
    assert stage_cost(zero, [0.0], zero, [0.0], Q, R) == 0.0
    assert stage_cost([1.0, 0.0, 0.0, 0.0], [0.0], zero, [0.0], Q, R) == pytest.approx(5.0)
    assert stage_cost([2.0, 0.0, 0.0, 0.0], [0.0], zero, [0.0], Q, R) == pytest.approx(20.0)


def test_terminal_cost_examples():
    Q = [5.0, 0.1, 5.0, 0.1]
    zero = np.zeros(4)
    assert terminal_cost(zero, zero, Q) == 0.0
    assert terminal_cost([0.0, 1.0, 0.0, 0.0], zero, Q) == pytest.approx(0.1)
    both = terminal_cost([1.0, 1.0, 0.0, 0.0], zero, Q)
    assert both == pytest.approx(terminal_cost([1.0, 0.0, 0.0, 0.0], zero, Q) + 0.1)


# ==================== Solver ====================

@pytest.mark.parametrize("steps", [10, 20])
def test_solution_matches_riccati_oracle_on_linear_problem(steps):
    cfg = OcpConfig(horizon=0.1 * steps, steps=steps, Q=[1.0, 0.5], R=[0.1], reg_lambda=0.0, sqp_tol=1e-9)
    x0 = np.array([1.0, -0.5])
    x_refs, u_refs = _constant_window([0.0, 0.0], [0.0], cfg.steps)
    solution = solve_ocp(DOUBLE_INTEGRATOR, x0, x_refs, u_refs, cfg)

    _, A_d, B_d = rk4_sensitivities(DOUBLE_INTEGRATOR, np.zeros(2), np.zeros(1), cfg.dt)
    Qm, Rm = np.diag(cfg.Q), np.diag(cfg.R)
    P = Qm
    gains = []
    for _ in range(cfg.steps):
        K = np.linalg.solve(Rm + B_d.T @ P @ B_d, B_d.T @ P @ A_d)
        P = Qm + A_d.T @ P @ (A_d - B_d @ K)
        gains.append(K)
    gains.reverse()

    x = x0.copy()
    expected = []
    for K in gains:
        u = -K @ x
        expected.append(u)
        x = A_d @ x + B_d @ u

    assert solution.converged
    assert np.allclose(solution.controls, np.array(expected), atol=1e-8)
    # one full Newton step, then a zero feedforward confirms it
    assert solution.iters <= 2
    assert len(solution.cost_history) == 2


def test_already_optimal_problem_returns_reference():
    spec = make_plant("cart_pole")
    cfg = OcpConfig(Q=[5.0, 0.1, 5.0, 0.1], R=[0.1], bounds=[(-10.0, 10.0)])
    x_refs, u_refs = _constant_window(np.zeros(4), [0.0], cfg.steps)
    solution = solve_ocp(AugmentedModel(spec), np.zeros(4), x_refs, u_refs, cfg)

    assert solution.converged
    assert solution.cost == 0.0
    assert np.all(solution.controls == 0.0)


def test_far_reference_saturates_first_control():
    cfg = OcpConfig(horizon=1.0, steps=20, Q=[5.0, 0.1], R=[0.1], bounds=[(-1.0, 1.0)])
    x_refs, u_refs = _constant_window([10.0, 0.0], [0.0], cfg.steps)
    solution = solve_ocp(DOUBLE_INTEGRATOR, np.zeros(2), x_refs, u_refs, cfg)

    assert solution.controls[0, 0] == 1.0
    assert np.all(solution.controls <= 1.0) and np.all(solution.controls >= -1.0)


def test_solution_states_close_shooting_gaps():
    spec = make_plant("cart_pole")
    model = AugmentedModel(spec)
    cfg = OcpConfig(Q=[5.0, 0.1, 5.0, 0.1], R=[0.1], bounds=[(-10.0, 10.0)])
    x_refs, u_refs = _constant_window(np.zeros(4), [0.0], cfg.steps)
    solution = solve_ocp(model, np.array([0.3, 0.0, 0.1, 0.0]), x_refs, u_refs, cfg)

    x = solution.states[0]
    for k in range(cfg.steps):
        x = rk4_step(model.derivative, x, solution.controls[k], cfg.dt)
        assert np.allclose(x, solution.states[k + 1], atol=1e-8)


def test_quad_hover_converges_from_cold_start():
    spec = make_plant("quad_2d", nominal_scale={"m": 0.66, "I_yy": 0.8})
    cfg = OcpConfig(Q=[5.0, 0.1, 5.0, 0.1, 5.0, 0.1], R=[0.1, 0.1], bounds=[(0.0, 0.3), (0.0, 0.3)],
                    sqp_max_iters=10)
    x_ref = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
    x_refs, u_refs = _constant_window(x_ref, hover_thrust(spec), cfg.steps)
    solution = solve_ocp(AugmentedModel(spec), np.array([0.05, 0.0, 0.95, 0.0, 0.0, 0.0]), x_refs, u_refs, cfg)

    assert solution.converged
    assert solution.iters <= 10
    history = np.array(solution.cost_history)
    assert len(history) >= 2
    assert np.all(np.diff(history) <= 0.0)
    assert history[-1] == solution.cost


def test_warm_and_cold_starts_agree():
    spec = make_plant("cart_pole")
    model = AugmentedModel(spec)
    cfg = OcpConfig(Q=[5.0, 0.1, 5.0, 0.1], R=[0.1], bounds=[(-10.0, 10.0)])
    x_refs, u_refs = _constant_window(np.zeros(4), [0.0], cfg.steps)
    x0 = np.array([0.2, 0.0, -0.1, 0.0])

    cold = solve_ocp(model, x0, x_refs, u_refs, cfg)
    warm = solve_ocp(model, x0, x_refs, u_refs, cfg, warm=cold)
    assert cold.converged and warm.converged
    assert warm.cost == pytest.approx(cold.cost, abs=1e-6)


def test_reference_window_length_checked():
    cfg = OcpConfig(horizon=1.0, steps=10, Q=[1.0, 1.0], R=[1.0])
    x_refs, u_refs = _constant_window([0.0, 0.0], [0.0], 5)
    with pytest.raises(ShapeError):
        solve_ocp(DOUBLE_INTEGRATOR, np.zeros(2), x_refs, u_refs, cfg)


def test_discrete_lqr_gain_scalar():
    K = discrete_lqr_gain(np.array([[1.0]]), np.array([[1.0]]), [1.0], [1.0])
    golden = (1.0 + math.sqrt(5.0)) / 2.0
    assert K[0, 0] == pytest.approx(golden / (1.0 + golden), rel=1e-8)


# ==================== Receding horizon ====================

def test_mpc_step_returns_reference_when_satisfied():
    spec = make_plant("cart_pole")
    cfg = OcpConfig(Q=[5.0, 0.1, 5.0, 0.1], R=[0.1], bounds=[(-10.0, 10.0)])
    controller = MpcController(AugmentedModel(spec), cfg, ReferenceSignal.constant(np.zeros(4), [0.0]))
    result = mpc_step(controller, 0.0, np.zeros(4))
    assert not result.held
    assert np.array_equal(result.control, [0.0])


def test_mpc_step_is_idempotent_with_warm_start():
    spec = make_plant("cart_pole")
    cfg = OcpConfig(Q=[5.0, 0.1, 5.0, 0.1], R=[0.1], bounds=[(-10.0, 10.0)])
    controller = MpcController(AugmentedModel(spec), cfg, ReferenceSignal.constant(np.zeros(4), [0.0]))
    x = np.array([0.1, 0.0, 0.05, 0.0])
    first = mpc_step(controller, 0.0, x).control
    second = mpc_step(controller, 0.0, x).control
    assert np.allclose(first, second, atol=1e-5)


def test_mpc_step_holds_last_control_on_solver_failure():
    cfg = OcpConfig(horizon=1.0, steps=5, Q=[1.0], R=[1.0], bounds=[(-1.0, 1.0)])
    controller = MpcController(_NanModel(), cfg, ReferenceSignal.constant([0.0], [0.0]))
    controller.last_control = np.array([0.5])

    result = controller.step(0.0, np.array([1.0]))
    assert result.held
    assert result.solution is None
    assert np.array_equal(result.control, [0.5])
    assert controller.holds == 1


def test_mpc_step_without_history_falls_back_to_clipped_reference():
    cfg = OcpConfig(horizon=1.0, steps=5, Q=[1.0], R=[1.0], bounds=[(-1.0, 1.0)])
    controller = MpcController(_NanModel(), cfg, ReferenceSignal.constant([0.0], [3.0]))
    result = mpc_step(controller, 0.0, np.array([1.0]))
    assert result.held
    assert np.array_equal(result.control, [1.0])


def test_mpc_step_holds_on_singular_input_hessian():
    # zero weights and no regularization leave Quu exactly singular
    cfg = OcpConfig(horizon=1.0, steps=5, Q=[0.0, 0.0], R=[0.0], reg_lambda=0.0, bounds=[(-1.0, 1.0)])
    controller = MpcController(DOUBLE_INTEGRATOR, cfg, ReferenceSignal.constant([0.0, 0.0], [2.0]))
    result = mpc_step(controller, 0.0, np.array([1.0, 0.0]))
    assert result.held
    assert np.array_equal(result.control, [1.0])
    assert controller.holds == 1
