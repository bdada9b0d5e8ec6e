from __future__ import annotations

import math

import numpy as np
import pytest

from riskmm.errors import ConfigurationError, NonFiniteError
from riskmm.moe_dynamics import MoEModel, TrajectoryBundle, scenario_log_probs
from riskmm.objective import CostSpec, RiskConfig, RiskObjective, risk_loss, scenario_losses
from riskmm.oracles import fd_gradient, kl_objective, simplex_grid_min, simplex_resolution
from riskmm.surrogates import (
    SurrogateObjective,
    SurrogateParams,
    expansion_params,
    log_prob_linearization,
    optimal_pi,
    optimistic_surrogate,
    pessimistic_surrogate,
    surrogate_gradient,
    surrogate_value,
)
from riskmm.verification import Instance, random_instance

HALF = np.log([0.5, 0.5])


def _true_loss(inst: Instance, variant: str, gamma: float, traj: TrajectoryBundle) -> float:
    return RiskObjective(RiskConfig(gamma, variant), inst.tree, inst.model, inst.spec, inst.x0).value(traj)


def _exact(params: SurrogateParams) -> SurrogateParams:
    return SurrogateParams(params.variant, params.gamma, params.x_lin, params.pi, collision_mode="exact")


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


# --- optimal pi ---------------------------------------------------------------


def test_optimal_pi_with_equal_losses_is_the_prior():
    log_probs = np.log([0.1, 0.6, 0.3])
    np.testing.assert_allclose(optimal_pi(log_probs, np.full(3, 2.0), 0.8), np.exp(log_probs), atol=1e-12)


def test_optimal_pi_two_scenarios():
    pi = optimal_pi(HALF, np.array([0.0, 1.0]), 1.0)
    np.testing.assert_allclose(pi, [0.731059, 0.268941], atol=1e-6)
    assert pi.sum() == pytest.approx(1.0, abs=1e-10)


def test_optimal_pi_matches_grid_search():
    losses = np.array([0.0, 1.0])
    pi = optimal_pi(HALF, losses, 1.0)
    objective = kl_objective(np.exp(HALF), losses, 1.0)
    _, grid_value = simplex_grid_min(objective, 2, 1e-3)
    assert abs(grid_value - float(objective(pi)[0])) <= 1e-6


def test_optimal_pi_matches_grid_search_with_four_scenarios(rng):
    log_probs = np.log(rng.dirichlet(np.ones(4)))
    losses = rng.uniform(0.0, 3.0, size=4)
    pi = optimal_pi(log_probs, losses, 1.0)
    objective = kl_objective(np.exp(log_probs), losses, 1.0)
    _, grid_value = simplex_grid_min(objective, 4, simplex_resolution(4))
    assert float(objective(pi)[0]) <= grid_value + 1e-6


def test_optimal_pi_concentrates_for_large_gamma():
    pi = optimal_pi(np.log([0.3, 0.3, 0.4]), np.array([2.0, 1.0, 3.0]), 1e3)
    assert pi[1] >= 1 - 1e-6
    assert np.all(pi > 0)


def test_optimal_pi_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        optimal_pi(HALF, np.zeros(2), 0.0)
    with pytest.raises(NonFiniteError):
        optimal_pi(HALF, np.array([0.0, np.nan]), 1.0)


def test_surrogate_params_validation(instance):
    x_lin = np.zeros((instance.tree.n_nodes, instance.model.n_x))
    with pytest.raises(ConfigurationError):
        SurrogateParams("optimistic", 1.0, x_lin)
    with pytest.raises(ConfigurationError):
        SurrogateParams("optimistic", 1.0, x_lin, pi=np.array([0.5, 0.6]))
    with pytest.raises(ConfigurationError):
        SurrogateParams("pessimistic", -1.0, x_lin)


# --- log-probability linearisation --------------------------------------------


def test_linearisation_is_tangent_and_dominates(instance, rng):
    x_lin = instance.random_trajectory(rng).x
    exact = scenario_log_probs(instance.tree, instance.model, x_lin)
    np.testing.assert_allclose(log_prob_linearization(instance.tree, instance.model, x_lin, x_lin), exact, atol=1e-12)
    for _ in range(200):
        x = instance.random_trajectory(rng, scale=2.0).x
        bound = log_prob_linearization(instance.tree, instance.model, x, x_lin)
        assert np.all(bound >= scenario_log_probs(instance.tree, instance.model, x) - 1e-12)


def test_linearisation_with_constant_gate(binary_tree, rng):
    model = MoEModel(theta=np.zeros((2, 2)), A=np.stack([np.eye(2)] * 2), B=np.zeros((2, 2, 1)))
    bound = log_prob_linearization(binary_tree, model, rng.normal(size=(7, 2)), rng.normal(size=(7, 2)))
    np.testing.assert_allclose(bound, np.full(4, math.log(0.25)))


# --- majorization -------------------------------------------------------------


@pytest.mark.parametrize("variant", ["optimistic", "pessimistic"])
def test_surrogate_touches_loss_with_exact_collision(collision_instance, rng, variant):
    inst = collision_instance
    traj = inst.random_trajectory(rng)
    params = _exact(expansion_params(variant, 0.7, inst.tree, inst.model, inst.spec, traj, inst.x0))
    value = surrogate_value(inst.tree, inst.model, inst.spec, params, traj, inst.x0)
    assert value == pytest.approx(_true_loss(inst, variant, 0.7, traj), abs=1e-9)


@pytest.mark.parametrize("variant", ["optimistic", "pessimistic"])
@pytest.mark.parametrize("kind", ["exp_norm", "exp_sq_norm", "inverse_power"])
def test_surrogate_dominates_loss(rng, variant, kind):
    inst = random_instance(rng, d=2, horizon=3, collision=kind)
    anchor = inst.random_trajectory(rng)
    params = expansion_params(variant, 0.7, inst.tree, inst.model, inst.spec, anchor, inst.x0)
    for _ in range(1000):
        traj = inst.random_trajectory(rng, scale=1.0)
        slack = surrogate_value(inst.tree, inst.model, inst.spec, params, traj, inst.x0) - _true_loss(inst, variant, 0.7, traj)
        assert slack >= -1e-9


def test_optimistic_surrogate_with_prior_and_constant_losses(instance, rng):
    spec = CostSpec(Q=np.zeros((3, 3)), R=np.zeros((2, 2)), Q_f=np.zeros((3, 3)), tracked=(0, 1, 2))
    traj = instance.random_trajectory(rng)
    pi = np.exp(scenario_log_probs(instance.tree, instance.model, traj.x))
    params = SurrogateParams("optimistic", 1.0, traj.x, pi=pi / pi.sum())
    value = optimistic_surrogate(instance.tree, instance.model, spec, params, traj)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_pessimistic_surrogate_with_constant_gate_has_only_the_collision_gap(rng):
    inst = random_instance(rng, d=2, horizon=2, collision="exp_norm", theta_scale=0.0)
    anchor = inst.random_trajectory(rng)
    params = expansion_params("pessimistic", 1.0, inst.tree, inst.model, inst.spec, anchor, inst.x0)
    traj = inst.random_trajectory(rng)
    log_probs = scenario_log_probs(inst.tree, inst.model, traj.x)
    bounded = scenario_losses(inst.tree, traj, inst.spec, "upper_bound", anchor.x, inst.x0)
    expected = risk_loss(RiskConfig(1.0, "pessimistic"), log_probs, bounded)
    assert pessimistic_surrogate(inst.tree, inst.model, inst.spec, params, traj, inst.x0) == pytest.approx(expected, abs=1e-10)


def test_variant_mismatch_is_rejected(instance, rng):
    traj = instance.random_trajectory(rng)
    params = expansion_params("pessimistic", 1.0, instance.tree, instance.model, instance.spec, traj)
    with pytest.raises(ConfigurationError):
        optimistic_surrogate(instance.tree, instance.model, instance.spec, params, traj)
    with pytest.raises(ConfigurationError):
        surrogate_gradient("optimistic", instance.tree, instance.model, instance.spec, params, traj)


@pytest.mark.parametrize("variant", ["optimistic", "pessimistic"])
def test_surrogate_is_convex_along_segments(collision_instance, rng, variant):
    inst = collision_instance
    anchor = inst.random_trajectory(rng)
    params = expansion_params(variant, 0.7, inst.tree, inst.model, inst.spec, anchor, inst.x0)

    def q(traj: TrajectoryBundle) -> float:
        return surrogate_value(inst.tree, inst.model, inst.spec, params, traj, inst.x0)

    for _ in range(100):
        a, b = inst.random_trajectory(rng).flatten(), inst.random_trajectory(rng).flatten()
        t = rng.uniform()
        mid = TrajectoryBundle.from_flat(t * a + (1 - t) * b, anchor)
        ends = t * q(TrajectoryBundle.from_flat(a, anchor)) + (1 - t) * q(TrajectoryBundle.from_flat(b, anchor))
        assert q(mid) <= ends + 1e-9


# --- gradients ----------------------------------------------------------------


@pytest.mark.parametrize("variant", ["optimistic", "pessimistic"])
def test_surrogate_gradient_matches_finite_differences(collision_instance, rng, variant):
    inst = collision_instance
    anchor = inst.random_trajectory(rng)
    params = expansion_params(variant, 0.7, inst.tree, inst.model, inst.spec, anchor, inst.x0)
    traj = inst.random_trajectory(rng)
    analytic = surrogate_gradient(variant, inst.tree, inst.model, inst.spec, params, traj, inst.x0).flatten()
    numeric = fd_gradient(
        lambda v: surrogate_value(inst.tree, inst.model, inst.spec, params, TrajectoryBundle.from_flat(v, traj), inst.x0),
        traj.flatten(),
    )
    assert _rel(analytic, numeric) <= 1e-5


def test_quadratic_surrogate_gradient_by_hand(rng):
    # single scenario with a constant gate: both surrogates reduce to the tracking cost
    inst = random_instance(rng, d=1, horizon=2)
    traj = inst.random_trajectory(rng)
    params = expansion_params("pessimistic", 1.0, inst.tree, inst.model, inst.spec, traj)
    grad = surrogate_gradient("pessimistic", inst.tree, inst.model, inst.spec, params, traj)
    np.testing.assert_allclose(grad.x[:2], traj.x[:2] @ inst.spec.Q, atol=1e-12)
    np.testing.assert_allclose(grad.x[2], traj.x[2] @ inst.spec.Q_f, atol=1e-12)
    np.testing.assert_allclose(grad.u, traj.u @ inst.spec.R, atol=1e-12)


def test_pessimistic_surrogate_gradient_is_tangent(instance, rng):
    traj = instance.random_trajectory(rng)
    params = expansion_params("pessimistic", 0.7, instance.tree, instance.model, instance.spec, traj, instance.x0)
    surrogate = SurrogateObjective(instance.tree, instance.model, instance.spec, params, instance.x0)(traj)[1]
    loss = RiskObjective(RiskConfig(0.7, "pessimistic"), instance.tree, instance.model, instance.spec, instance.x0)(traj)[1]
    assert _rel(surrogate.flatten(), loss.flatten()) <= 1e-6
