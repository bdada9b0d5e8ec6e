from __future__ import annotations

import numpy as np
import pytest

from riskmm.errors import ConfigurationError, DimensionError
from riskmm.inner_solver import (
    ConstraintSet,
    StateBox,
    bound_multipliers,
    condense,
    kkt_error,
    optimality_error,
    projected_gradient,
    solve,
)
from riskmm.moe_dynamics import MoEModel, TrajectoryBundle
from riskmm.oracles import reference_box_minimize
from riskmm.scenario_tree import build_tree
from riskmm.surrogates import SurrogateObjective, expansion_params
from riskmm.verification import random_instance, random_psd


def _scalar_integrator(d: int = 1) -> MoEModel:
    return MoEModel(theta=np.zeros((d, 1)), A=np.ones((d, 1, 1)), B=np.ones((d, 1, 1)))


def _input_quadratic(H: np.ndarray, target: np.ndarray):
    def objective(traj: TrajectoryBundle):
        r = traj.u.ravel() - target
        return 0.5 * float(r @ H @ r), TrajectoryBundle(x=np.zeros_like(traj.x), u=(H @ r).reshape(traj.u.shape))

    return objective


# --- condensing ---------------------------------------------------------------


def test_condense_without_inputs_propagates_the_measured_state(binary_tree):
    A = np.stack([2.0 * np.eye(2), -np.eye(2)])
    model = MoEModel(theta=np.zeros((2, 2)), A=A, B=np.zeros((2, 2, 1)))
    problem = condense(binary_tree, model, np.array([1.0, 3.0]))
    assert problem.E.nnz == 0
    np.testing.assert_allclose(problem.e[3], [4.0, 12.0])
    np.testing.assert_allclose(problem.e[6], [1.0, 3.0])


def test_condense_scalar_chain_by_hand():
    tree = build_tree(1, 2, 2)
    problem = condense(tree, _scalar_integrator(), np.array([0.7]))
    np.testing.assert_allclose(problem.e.ravel(), [0.7, 0.7, 0.7])
    np.testing.assert_allclose(problem.E.toarray(), [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])


@pytest.mark.parametrize("n_branch", [0, 2, 3])
def test_condense_reproduces_rollout(rng, n_branch):
    inst = random_instance(rng, d=3, horizon=3, n_branch=n_branch)
    u = inst.random_inputs(rng)
    problem = condense(inst.tree, inst.model, inst.x0)
    traj = problem.trajectory(problem.stack(u))
    np.testing.assert_allclose(traj.x, inst.trajectory(u).x, atol=1e-12)
    np.testing.assert_array_equal(traj.u, u)


def test_condense_rejects_mismatched_shapes(instance):
    with pytest.raises(DimensionError):
        condense(instance.tree, instance.model, np.zeros(instance.model.n_x + 1))
    with pytest.raises(DimensionError):
        condense(instance.tree, instance.model, instance.x0, ConstraintSet(np.zeros(5), np.ones(5)))


def test_constraint_set_validation():
    with pytest.raises(ConfigurationError):
        ConstraintSet(np.ones(2), np.zeros(2))
    with pytest.raises(ConfigurationError):
        ConstraintSet(np.zeros(1), np.ones(1), (StateBox(0, 1.0, -1.0),))
    boxes = ConstraintSet(np.zeros(1), np.ones(1), (StateBox(0, -1.0, 1.0),))
    assert boxes.state_violation(np.array([[0.5], [1.25], [-3.0]])) == pytest.approx(2.0)


# --- optimality error ---------------------------------------------------------


def test_optimality_error_definitions():
    lower, upper = np.full(3, -np.inf), np.full(3, np.inf)
    zeros = np.zeros(3)
    assert optimality_error(np.ones(3), zeros, lower, upper, zeros, zeros) == 0.0
    g = np.array([0.5, -2.0, 1.0])
    assert optimality_error(np.zeros(3), g, lower, upper, zeros, zeros) == pytest.approx(2.0)


def test_optimality_error_scales_with_large_multipliers():
    # mean |multiplier| 200 gives s_d = 2
    w, lower, upper = np.zeros(2), np.zeros(2), np.full(2, np.inf)
    z = np.array([800.0, 0.0])
    g = np.array([800.0, 8.0])
    assert optimality_error(w, g, lower, upper, z, np.zeros(2)) == pytest.approx(4.0)


def test_optimality_error_of_a_clipped_minimiser():
    w, lower, upper = np.array([1.0]), np.array([-1.0]), np.array([1.0])
    g = w - 2.0
    z_lower, z_upper = bound_multipliers(w, g, lower, upper)
    assert z_upper[0] == pytest.approx(1.0)
    assert optimality_error(w, g, lower, upper, z_lower, z_upper) <= 1e-8


# --- box solver ---------------------------------------------------------------


def test_projected_gradient_unconstrained_quadratic(rng):
    H = random_psd(rng, 6, floor=1.0)
    target = rng.normal(size=6)

    def fun(w: np.ndarray):
        r = w - target
        return 0.5 * float(r @ H @ r), H @ r

    res = projected_gradient(fun, np.zeros(6), np.full(6, -np.inf), np.full(6, np.inf), tol=1e-10)
    assert res.status == "converged"
    np.testing.assert_allclose(res.w, target, atol=1e-8)


def test_solve_unconstrained_quadratic(rng):
    tree = build_tree(2, 2, 2)
    model = MoEModel(theta=np.zeros((2, 2)), A=np.stack([np.eye(2)] * 2), B=rng.normal(size=(2, 2, 2)))
    problem = condense(tree, model, np.zeros(2))
    H = random_psd(rng, problem.n_w, floor=1.0)
    target = rng.normal(size=problem.n_w)
    outcome = solve(problem, _input_quadratic(H, target), np.zeros(problem.n_w), tol=1e-10)
    assert outcome.status == "converged"
    np.testing.assert_allclose(outcome.w, target, atol=1e-8)


def test_solve_clips_to_the_input_box():
    tree = build_tree(1, 1, 1)
    problem = condense(tree, _scalar_integrator(), np.zeros(1), ConstraintSet(np.array([-1.0]), np.array([1.0])))
    outcome = solve(problem, _input_quadratic(np.eye(1), np.array([2.0])), np.zeros(1), tol=1e-10)
    assert outcome.w[0] == pytest.approx(1.0)
    assert outcome.optimality_error <= 1e-8


def test_solve_surrogate_meets_first_order_conditions(rng):
    inst = random_instance(rng, d=2, horizon=3, collision="exp_norm")
    constraints = ConstraintSet(np.full(2, -0.3), np.full(2, 0.3))
    problem = condense(inst.tree, inst.model, inst.x0, constraints)
    anchor = problem.trajectory(np.zeros(problem.n_w))
    params = expansion_params("pessimistic", 0.5, inst.tree, inst.model, inst.spec, anchor, inst.x0)
    objective = SurrogateObjective(inst.tree, inst.model, inst.spec, params, inst.x0)
    outcome = solve(problem, objective, np.zeros(problem.n_w), tol=1e-6)
    assert outcome.status == "converged"
    _, grad = objective(outcome.trajectory)
    assert kkt_error(problem, outcome.w, problem.pull_back(grad), outcome.lam_lower, outcome.lam_upper) <= 1e-6
    assert np.all(np.abs(outcome.w) <= 0.3)


def test_solve_agrees_with_fixed_step_reference(rng):
    inst = random_instance(rng, d=2, horizon=2)
    constraints = ConstraintSet(np.full(2, -0.2), np.full(2, 0.2))
    problem = condense(inst.tree, inst.model, inst.x0, constraints)
    anchor = problem.trajectory(np.zeros(problem.n_w))
    params = expansion_params("optimistic", 1.0, inst.tree, inst.model, inst.spec, anchor, inst.x0)
    objective = SurrogateObjective(inst.tree, inst.model, inst.spec, params, inst.x0)

    def flat(w: np.ndarray):
        value, grad = objective(problem.trajectory(w))
        return value, problem.pull_back(grad)

    outcome = solve(problem, objective, np.zeros(problem.n_w), tol=1e-9)
    # fixed step below 1 / Lipschitz of the quadratic part, which dominates
    hessian = np.column_stack([flat(np.eye(problem.n_w)[i])[1] - flat(np.zeros(problem.n_w))[1] for i in range(problem.n_w)])
    step = 0.25 / max(1.0, float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (hessian + hessian.T))))))
    reference = reference_box_minimize(flat, np.zeros(problem.n_w), problem.w_lower, problem.w_upper, step, max_iter=200_000, tol=1e-12)
    np.testing.assert_allclose(outcome.w, reference, atol=1e-5)


def test_state_box_is_enforced_by_augmented_lagrangian():
    tree = build_tree(1, 3, 3)
    constraints = ConstraintSet(np.array([-5.0]), np.array([5.0]), (StateBox(0, -10.0, 1.0),))
    problem = condense(tree, _scalar_integrator(), np.zeros(1), constraints)

    def objective(traj: TrajectoryBundle):
        r = traj.x[1:, 0] - 2.0
        gx = np.zeros_like(traj.x)
        gx[1:, 0] = r
        return 0.5 * float(r @ r) + 0.05 * float(np.sum(traj.u**2)), TrajectoryBundle(x=gx, u=0.1 * traj.u)

    outcome = solve(problem, objective, np.zeros(problem.n_w), tol=1e-6)
    assert problem.constraint_violation(outcome.w) <= 1e-5
    np.testing.assert_allclose(outcome.trajectory.x[1:, 0], 1.0, atol=1e-3)
    assert outcome.lam_upper.max() > 0
