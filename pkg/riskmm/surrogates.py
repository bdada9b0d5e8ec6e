from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from riskmm.errors import ConfigurationError, DimensionError, NonFiniteError
from riskmm.moe_dynamics import MoEModel, TrajectoryBundle, log_prob_pullback, scenario_log_probs
from riskmm.objective import CollisionMode, CostSpec, node_cost_pullback, scenario_losses
from riskmm.scenario_tree import ScenarioTree

logger = logging.getLogger("riskmm.surrogates")

Variant = Literal["optimistic", "pessimistic"]


@dataclass(frozen=True)
class SurrogateParams:
    """Expansion data of one MM majorizer.

    ``x_lin`` is the previous iterate; both the gate linearisation and the
    collision bound are expanded there. ``pi`` is only used by the optimistic
    variant. ``collision_mode="exact"`` keeps the original penalty (used to
    check tangency; the surrogate is then no longer convex).
    """

    variant: Variant
    gamma: float
    x_lin: np.ndarray
    pi: np.ndarray | None = None
    collision_mode: CollisionMode = "upper_bound"

    def __post_init__(self) -> None:
        if self.variant not in ("optimistic", "pessimistic"):
            raise ConfigurationError(f"Unknown surrogate variant '{self.variant}'")
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if self.variant == "optimistic":
            if self.pi is None:
                raise ConfigurationError("The optimistic surrogate needs a scenario distribution pi")
            pi = np.asarray(self.pi, dtype=float)
            if np.any(pi <= 0.0) or abs(pi.sum() - 1.0) > 1e-10:
                raise ConfigurationError("pi must be a strictly positive probability vector")


def optimal_pi(log_probs: np.ndarray, losses: np.ndarray, gamma: float) -> np.ndarray:
    """Minimiser over the simplex of KL(Π‖P)/γ + Πᵀ L: softmax(log P − γ L)."""
    log_probs = np.asarray(log_probs, dtype=float)
    losses = np.asarray(losses, dtype=float)
    if not gamma > 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    if not (np.all(np.isfinite(log_probs)) and np.all(np.isfinite(losses))):
        raise NonFiniteError("optimal_pi needs finite log-probabilities and losses")
    # clamp keeps every entry strictly positive when one scenario dominates by >700 nats
    return np.maximum(softmax(log_probs - gamma * losses), np.finfo(float).tiny)


def expansion_params(
    variant: Variant,
    gamma: float,
    tree: ScenarioTree,
    model: MoEModel,
    spec: CostSpec,
    traj: TrajectoryBundle,
    x_meas: np.ndarray | None = None,
) -> SurrogateParams:
    """Surrogate parameters that make the majorizer touch the loss at ``traj``."""
    pi = None
    if variant == "optimistic":
        log_probs = scenario_log_probs(tree, model, traj.x)
        losses = scenario_losses(tree, traj, spec, x_meas=x_meas)
        pi = optimal_pi(log_probs, losses, gamma)
        pi = pi / pi.sum()
    return SurrogateParams(variant=variant, gamma=gamma, x_lin=traj.x.copy(), pi=pi)


def log_prob_linearization(tree: ScenarioTree, model: MoEModel, x: np.ndarray, x_lin: np.ndarray) -> np.ndarray:
    """Per-scenario upper bound on log P, affine in x and exact at x = x_lin.

    Each branching edge contributes (Θx)_ξ − lse(Θx̃) − σ(Θx̃)ᵀ(Θx − Θx̃).
    """
    model.check_tree(tree)
    x = np.asarray(x, dtype=float)
    x_lin = np.asarray(x_lin, dtype=float)
    if x.shape != (tree.n_nodes, model.n_x) or x_lin.shape != x.shape:
        raise DimensionError(f"Node states must have shape {(tree.n_nodes, model.n_x)}")
    z = x @ model.theta.T
    z_lin = x_lin @ model.theta.T
    gate_lin = softmax(z_lin, axis=1)
    node_term = -logsumexp(z_lin, axis=1) - np.einsum("nd,nd->n", gate_lin, z - z_lin)

    children = np.flatnonzero(tree.branching_edges)
    parents = tree.parents[children]
    edges = np.zeros(tree.n_nodes)
    edges[children] = z[parents, tree.modes[children] - 1] + node_term[parents]
    return tree.path_matrix @ edges


def _require(params: SurrogateParams, variant: Variant) -> None:
    if params.variant != variant:
        raise ConfigurationError(f"Expected {variant} surrogate parameters, got {params.variant}")


def _losses(tree, traj, spec, params: SurrogateParams, x_meas) -> np.ndarray:
    return scenario_losses(tree, traj, spec, params.collision_mode, params.x_lin, x_meas)


def optimistic_surrogate(
    tree: ScenarioTree,
    model: MoEModel,
    spec: CostSpec,
    params: SurrogateParams,
    traj: TrajectoryBundle,
    x_meas: np.ndarray | None = None,
) -> float:
    _require(params, "optimistic")
    log_probs = scenario_log_probs(tree, model, traj.x)
    pi = np.asarray(params.pi)
    kl = float(pi @ (np.log(pi) - log_probs))
    return kl / params.gamma + float(pi @ _losses(tree, traj, spec, params, x_meas))


def pessimistic_surrogate(
    tree: ScenarioTree,
    model: MoEModel,
    spec: CostSpec,
    params: SurrogateParams,
    traj: TrajectoryBundle,
    x_meas: np.ndarray | None = None,
) -> float:
    _require(params, "pessimistic")
    bound = log_prob_linearization(tree, model, traj.x, params.x_lin)
    losses = _losses(tree, traj, spec, params, x_meas)
    return float(logsumexp(bound + params.gamma * losses) / params.gamma)


def surrogate_value(
    tree: ScenarioTree,
    model: MoEModel,
    spec: CostSpec,
    params: SurrogateParams,
    traj: TrajectoryBundle,
    x_meas: np.ndarray | None = None,
) -> float:
    if params.variant == "optimistic":
        return optimistic_surrogate(tree, model, spec, params, traj, x_meas)
    return pessimistic_surrogate(tree, model, spec, params, traj, x_meas)


def surrogate_gradient(
    variant: Variant,
    tree: ScenarioTree,
    model: MoEModel,
    spec: CostSpec,
    params: SurrogateParams,
    traj: TrajectoryBundle,
    x_meas: np.ndarray | None = None,
) -> TrajectoryBundle:
    _require(params, variant)
    return SurrogateObjective(tree, model, spec, params, x_meas)(traj)[1]


@dataclass
class SurrogateObjective:
    """Value and gradient of one convex majorizer, the form the inner solver consumes."""

    tree: ScenarioTree
    model: MoEModel
    spec: CostSpec
    params: SurrogateParams
    x_meas: np.ndarray | None = None

    def __call__(self, traj: TrajectoryBundle) -> Tuple[float, TrajectoryBundle]:
        tree, model, params = self.tree, self.model, self.params
        losses = _losses(tree, traj, self.spec, params, self.x_meas)

        if params.variant == "optimistic":
            pi = np.asarray(params.pi)
            log_probs = scenario_log_probs(tree, model, traj.x)
            value = float(pi @ (np.log(pi) - log_probs)) / params.gamma + float(pi @ losses)
            w_log_probs, w_losses = -pi / params.gamma, pi
            gate = softmax(traj.x @ model.theta.T, axis=1)
        else:
            bound = log_prob_linearization(tree, model, traj.x, params.x_lin)
            value = float(logsumexp(bound + params.gamma * losses) / params.gamma)
            tilted = softmax(bound + params.gamma * losses)
            w_log_probs, w_losses = tilted / params.gamma, tilted
            gate = softmax(params.x_lin @ model.theta.T, axis=1)

        grad = node_cost_pullback(
            tree,
            traj,
            self.spec,
            tree.path_matrix.T @ w_losses,
            params.collision_mode,
            params.x_lin,
            self.x_meas,
        )
        gx = grad.x + log_prob_pullback(tree, model, gate, w_log_probs)
        return value, TrajectoryBundle(x=gx, u=grad.u)
