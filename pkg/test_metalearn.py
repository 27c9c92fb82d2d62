"""
test_metalearn.py - Episodes, inner adaptation, meta-gradients and meta-training
"""

import numpy as np
import pytest

from config import MetaConfig, SimulationConfig, TaskConfig
from dynamics import make_plant, sample_tasks
from errors import ConfigurationError, NumericError
from metalearn import (
    EpisodeData,
    ExcitationSetup,
    build_episode,
    build_task_dataset,
    evaluate_few_shot,
    inner_adapt,
    meta_gradient,
    meta_train,
    pooled_generator,
)
from numcore import flatten_params, mlp_forward, mlp_init, mlp_loss, mlp_param_gradient, unflatten_params


@pytest.fixture
def vdp():
    return make_plant("van_der_pol", true_params={"mu": 0.2}, nominal_params={"mu": 0.7})


@pytest.fixture
def setup():
    return ExcitationSetup(
        tasks=TaskConfig(protocol="vdp_grid", rollouts_per_task=1, rollout_duration=4.0, label_mode="analytic"),
        simulation=SimulationConfig(duration=4.0, control_period=0.02, substep=1e-3, noise_sigma=0.0),
    )


def _episode(k=6, seed=0, in_dim=2, out_dim=1):
    rng = np.random.default_rng(seed)
    return EpisodeData(
        task_id="synthetic",
        support_inputs=rng.normal(size=(k, in_dim)),
        support_targets=rng.normal(size=(k, out_dim)),
        query_inputs=rng.normal(size=(k, in_dim)),
        query_targets=rng.normal(size=(k, out_dim)),
    )


def _composite_gradient(model, episode, alpha, steps, eps=1e-6):
    """Central differences of theta -> L_query(inner_adapt(theta))."""
    theta = flatten_params(model)

    def objective(params):
        adapted = inner_adapt(unflatten_params(model, params), episode.support_inputs, episode.support_targets,
                              alpha, steps, "mse")
        return mlp_loss(adapted, episode.query_inputs, episode.query_targets, "mse")

    grad = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = eps
        grad[i] = (objective(theta + step) - objective(theta - step)) / (2 * eps)
    return grad


def _meta_cfg(**overrides):
    base = dict(inner_lr=0.1, meta_lr=0.01, epochs=5, k_shot=6, loss="mse", refresh_every=2, log_every=1)
    base.update(overrides)
    return MetaConfig(**base)


# ==================== Episodes ====================

def test_episode_has_k_disjoint_samples(vdp, setup):
    task = sample_tasks(vdp, "vdp_grid")[2]
    episode = build_episode(task, 50, seed=3, setup=setup)
    assert episode.k_shot == 50
    assert episode.query_inputs.shape == (50, 2)
    assert episode.support_targets.shape == (50, 1)
    support = {tuple(row) for row in episode.support_inputs}
    query = {tuple(row) for row in episode.query_inputs}
    assert not support & query


def test_episode_is_deterministic_per_seed(vdp, setup):
    task = sample_tasks(vdp, "vdp_grid")[5]
    dataset = build_task_dataset(task, setup, seed=1)
    a = build_episode(task, 20, seed=9, dataset=dataset)
    b = build_episode(task, 20, seed=9, dataset=dataset)
    assert np.array_equal(a.support_inputs, b.support_inputs)
    assert np.array_equal(a.query_targets, b.query_targets)


def test_analytic_labels_match_damping_gap(vdp, setup):
    task = next(t for t in sample_tasks(vdp, "vdp_grid") if t.base.true_params["mu"] == 0.2)
    dataset = build_task_dataset(task, setup, seed=0)
    x1, x2 = dataset.inputs[:, 0], dataset.inputs[:, 1]
    assert np.allclose(dataset.targets[:, 0], -0.5 * (1.0 - x1 ** 2) * x2)


def test_nominal_task_labels_vanish(vdp, setup):
    task = next(t for t in sample_tasks(vdp, "vdp_grid") if t.base.true_params["mu"] == 0.7)
    dataset = build_task_dataset(task, setup, seed=0)
    assert np.max(np.abs(dataset.targets)) < 1e-12


def test_pool_smaller_than_two_k_rejected(vdp, setup):
    task = sample_tasks(vdp, "vdp_grid")[0]
    dataset = build_task_dataset(task, setup, seed=0)
    with pytest.raises(ConfigurationError):
        build_episode(task, len(dataset), seed=0, dataset=dataset)


def test_episode_rejects_non_finite_targets():
    with pytest.raises(NumericError):
        EpisodeData("bad", np.zeros((2, 2)), np.array([[np.nan], [0.0]]), np.zeros((2, 2)), np.zeros((2, 1)))


# ==================== Inner loop ====================

def test_inner_adapt_single_sgd_step():
    model = unflatten_params(mlp_init([1, 1], seed=0), np.array([1.0, 0.0]))
    adapted = inner_adapt(model, np.array([[1.0]]), np.array([[0.0]]), alpha=0.05)
    # L = (w + b)^2, dL/dw = 2 at w=1, b=0
    assert adapted.weights[0][0, 0] == pytest.approx(0.9)


def test_inner_adapt_perfect_fit_is_fixed_point():
    model = mlp_init([2, 8, 1], seed=4)
    X = np.random.default_rng(0).normal(size=(5, 2))
    adapted = inner_adapt(model, X, mlp_forward(model, X), alpha=0.1, steps=3)
    assert np.array_equal(flatten_params(adapted), flatten_params(model))


def test_inner_adapt_descends_support_loss():
    model = unflatten_params(mlp_init([2, 1], seed=0), np.array([0.3, -0.2, 0.1]))
    X = np.random.default_rng(1).normal(size=(10, 2))
    Y = X @ np.array([[1.0], [2.0]])
    losses = [mlp_loss(m, X, Y) for m in (model, inner_adapt(model, X, Y, 0.05, 1), inner_adapt(model, X, Y, 0.05, 2))]
    assert losses[0] > losses[1] > losses[2]


# ==================== Meta-gradient ====================

def test_zero_inner_rate_gives_query_gradient_for_both_variants():
    model = mlp_init([2, 8, 1], seed=2)
    episode = _episode()
    expected = mlp_param_gradient(model, episode.query_inputs, episode.query_targets, "mse")
    for second_order in (False, True):
        cfg = _meta_cfg(second_order=second_order).model_copy(update={"inner_lr": 0.0})
        assert np.array_equal(meta_gradient(model, episode, cfg), expected)


def test_second_order_matches_composite_on_linear_model():
    model = mlp_init([2, 1], seed=1)
    episode = _episode(seed=4)
    cfg = _meta_cfg(second_order=True)
    assert np.allclose(meta_gradient(model, episode, cfg), _composite_gradient(model, episode, cfg.inner_lr, 1),
                       rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("steps", [1, 2])
def test_second_order_matches_composite_on_small_network(steps):
    model = mlp_init([2, 8, 1], seed=6)
    episode = _episode(seed=7)
    cfg = _meta_cfg(second_order=True, inner_steps=steps)
    assert np.allclose(meta_gradient(model, episode, cfg), _composite_gradient(model, episode, cfg.inner_lr, steps),
                       rtol=1e-4, atol=1e-7)


def test_first_order_is_query_gradient_at_adapted_parameters():
    model = mlp_init([2, 8, 1], seed=6)
    episode = _episode(seed=7)
    cfg = _meta_cfg()
    adapted = inner_adapt(model, episode.support_inputs, episode.support_targets, cfg.inner_lr)
    expected = mlp_param_gradient(adapted, episode.query_inputs, episode.query_targets, "mse")
    assert np.array_equal(meta_gradient(model, episode, cfg), expected)


# ==================== Meta-training ====================

def test_meta_train_is_deterministic(vdp, setup):
    tasks = sample_tasks(vdp, "vdp_grid")[:3]
    generators = [pooled_generator(build_task_dataset(t, setup, seed=i), 6) for i, t in enumerate(tasks)]
    initial = mlp_init([2, 8, 1], seed=0)
    cfg = _meta_cfg(task_batch=2)

    a, log_a = meta_train(generators, initial, cfg, seed=5, record_timing=False)
    b, log_b = meta_train(generators, initial, cfg, seed=5, record_timing=False)
    assert np.array_equal(flatten_params(a), flatten_params(b))
    assert log_a.equals(log_b)
    assert list(log_a.columns) == ["epoch", "mean_query_loss", "grad_norm", "wall_ms"]
    assert len(log_a) == cfg.epochs


def test_meta_train_on_zero_residual_task_drives_loss_down(vdp, setup):
    task = next(t for t in sample_tasks(vdp, "vdp_grid") if t.base.true_params["mu"] == 0.7)
    generator = pooled_generator(build_task_dataset(task, setup, seed=0), 10)
    cfg = _meta_cfg(epochs=200, meta_lr=0.05, inner_lr=0.01, k_shot=10, refresh_every=50, log_every=100)

    _, log = meta_train([generator], mlp_init([2, 8, 1], seed=3), cfg, seed=0, record_timing=False)
    first = log["mean_query_loss"].iloc[:20].mean()
    last = log["mean_query_loss"].iloc[-20:].mean()
    assert last < 0.8 * first


def test_meta_train_needs_tasks():
    with pytest.raises(ConfigurationError):
        meta_train([], mlp_init([2, 4, 1]), _meta_cfg())


def test_evaluate_few_shot_zero_rate_and_adaptation_gain():
    model = mlp_init([2, 8, 1], seed=0)
    X = np.random.default_rng(2).normal(size=(12, 2))
    Y = 0.5 * X[:, :1]
    episode = EpisodeData("held-out", X[:6], Y[:6], X[6:], Y[6:])

    pre, post = evaluate_few_shot(model, episode, alpha=0.0)
    assert pre == post

    pre, post = evaluate_few_shot(model, episode, alpha=0.05, steps=5)
    assert post < pre
