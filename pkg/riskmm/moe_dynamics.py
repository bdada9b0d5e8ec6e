from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from riskmm.errors import DimensionError
from riskmm.scenario_tree import ScenarioTree, stage_nodes

logger = logging.getLogger("riskmm.moe_dynamics")


@dataclass(frozen=True)
class MoEModel:
    """Switched linear dynamics x+ = A_ξ x + B_ξ u with gate ξ ~ softmax(Θ x).

    Affine gates are expressed by augmenting the state with a constant-1
    coordinate; there is no separate bias term.
    """

    theta: np.ndarray
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self) -> None:
        theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise DimensionError(f"A must have shape (d, n_x, n_x), got {A.shape}")
        if B.ndim != 3 or B.shape[:2] != A.shape[:2]:
            raise DimensionError(f"B must have shape (d, n_x, n_u) matching A {A.shape}, got {B.shape}")
        if theta.shape != (A.shape[0], A.shape[1]):
            raise DimensionError(f"Theta must have shape (d, n_x) = {A.shape[:2]}, got {theta.shape}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def n_x(self) -> int:
        return self.A.shape[1]

    @property
    def n_u(self) -> int:
        return self.B.shape[2]

    def check_tree(self, tree: ScenarioTree) -> None:
        if tree.d != self.d:
            raise DimensionError(f"Tree has {tree.d} modes but the model has {self.d}")


@dataclass(frozen=True)
class TrajectoryBundle:
    """State per tree node (``x``) and input per non-leaf node (``u``), indexed by node id.

    Gradients with respect to the decision variables use the same layout.
    """

    x: np.ndarray
    u: np.ndarray

    def copy(self) -> "TrajectoryBundle":
        return TrajectoryBundle(x=self.x.copy(), u=self.u.copy())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.x.ravel(), self.u.ravel()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, like: "TrajectoryBundle") -> "TrajectoryBundle":
        n = like.x.size
        return cls(x=flat[:n].reshape(like.x.shape), u=flat[n:].reshape(like.u.shape))


def _check_state(model: MoEModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n_x:
        raise DimensionError(f"State has length {x.shape[-1]}, model expects {model.n_x}")
    return x


def gate_logits(model: MoEModel, x: np.ndarray) -> np.ndarray:
    return _check_state(model, x) @ model.theta.T


def gate_distribution(model: MoEModel, x: np.ndarray) -> np.ndarray:
    return softmax(gate_logits(model, x), axis=-1)


def step(model: MoEModel, x: np.ndarray, u: np.ndarray, mode: int) -> np.ndarray:
    if not 1 <= mode <= model.d:
        raise DimensionError(f"Mode {mode} outside 1..{model.d}")
    x = _check_state(model, x)
    u = np.asarray(u, dtype=float)
    if u.shape != (model.n_u,):
        raise DimensionError(f"Input has shape {u.shape}, model expects ({model.n_u},)")
    return model.A[mode - 1] @ x + model.B[mode - 1] @ u


def rollout(tree: ScenarioTree, model: MoEModel, x0: np.ndarray, u: np.ndarray) -> TrajectoryBundle:
    model.check_tree(tree)
    x0 = _check_state(model, x0)
    u = np.asarray(u, dtype=float)
    if u.shape != (tree.n_inner, model.n_u):
        raise DimensionError(f"Inputs must have shape {(tree.n_inner, model.n_u)}, got {u.shape}")

    x = np.empty((tree.n_nodes, model.n_x))
    x[0] = x0
    for k in range(1, tree.horizon + 1):
        ids = np.asarray(stage_nodes(tree, k))
        parents = tree.parents[ids]
        modes = tree.modes[ids] - 1
        x[ids] = np.einsum("nij,nj->ni", model.A[modes], x[parents]) + np.einsum(
            "nij,nj->ni", model.B[modes], u[parents]
        )
    return TrajectoryBundle(x=x, u=u.copy())


def edge_log_probs(tree: ScenarioTree, model: MoEModel, x: np.ndarray) -> np.ndarray:
    """Log-probability of each node's incoming edge; zero on the root and frozen edges."""
    model.check_tree(tree)
    x = _check_state(model, x)
    if x.shape[0] != tree.n_nodes:
        raise DimensionError(f"Expected {tree.n_nodes} node states, got {x.shape[0]}")
    log_gate = log_softmax(x @ model.theta.T, axis=1)
    values = np.zeros(tree.n_nodes)
    mask = tree.branching_edges
    children = np.flatnonzero(mask)
    values[children] = log_gate[tree.parents[children], tree.modes[children] - 1]
    return values


def scenario_log_probs(tree: ScenarioTree, model: MoEModel, x: np.ndarray) -> np.ndarray:
    return tree.path_matrix @ edge_log_probs(tree, model, x)


def log_prob_pullback(
    tree: ScenarioTree,
    model: MoEModel,
    gate_probs: np.ndarray,
    scenario_weights: np.ndarray,
) -> np.ndarray:
    """State gradient of ``scenario_weights · log P`` given per-node gate probabilities.

    With the exact gate probabilities this is the gradient of the scenario
    log-probabilities; with probabilities taken at a linearisation point it is
    the gradient of their log-sum-exp linearisation.
    """
    edge_weights = tree.path_matrix.T @ scenario_weights
    children = np.flatnonzero(tree.branching_edges)
    coeff = np.zeros((tree.n_nodes, model.d))
    np.add.at(coeff, (tree.parents[children], tree.modes[children] - 1), edge_weights[children])
    totals = coeff.sum(axis=1, keepdims=True)
    return (coeff - totals * gate_probs) @ model.theta


def sample_mode(model: MoEModel, x: np.ndarray, rng: np.random.Generator) -> int:
    probs = gate_distribution(model, x)
    return int(rng.choice(model.d, p=probs)) + 1
