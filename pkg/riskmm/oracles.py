"""Brute-force reference computations.

Nothing here calls the fast paths it is used to check: no scipy softmax or
log-sum-exp, no condensing, no tree path matrix. Everything is plain loops
and dense numpy, so these are slow by construction.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Sequence, Tuple

import numpy as np

from riskmm.errors import DimensionError, NonFiniteError, OracleDomainError
from riskmm.moe_dynamics import MoEModel
from riskmm.scenario_tree import ScenarioTree

logger = logging.getLogger("riskmm.oracles")

FD_STEP = 1e-6
MAX_SIMPLEX_DIM = 4
MAX_ENUMERATED_SCENARIOS = 64


def fd_gradient(fun: Callable[[np.ndarray], float], point: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    point = np.asarray(point, dtype=float)
    flat = point.ravel()
    grad = np.empty(flat.size)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] = flat[i] + step
        f_plus = float(fun(shifted.reshape(point.shape)))
        shifted[i] = flat[i] - step
        f_minus = float(fun(shifted.reshape(point.shape)))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(f"Non-finite evaluation at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(point.shape)


SIMPLEX_GRID_STEP = 1e-3


def simplex_resolution(dim: int) -> float:
    """Grid step used by the Π* checks, the same for every dimension up to MAX_SIMPLEX_DIM."""
    if dim > MAX_SIMPLEX_DIM:
        raise OracleDomainError(f"Simplex grid search supports dimension <= {MAX_SIMPLEX_DIM}, got {dim}")
    return SIMPLEX_GRID_STEP


def _compositions(total: int, parts: int) -> np.ndarray:
    if parts == 1:
        return np.array([[total]])
    if parts == 2:
        first = np.arange(total + 1)
        return np.column_stack([first, total - first])
    if parts == 3:
        # i <= j enumerates a + b <= total as (i, j - i, total - j)
        i, j = np.triu_indices(total + 1)
        return np.column_stack([i, j - i, total - j])
    blocks = []
    for first in range(total + 1):
        rest = _compositions(total - first, parts - 1)
        blocks.append(np.hstack([np.full((len(rest), 1), first), rest]))
    return np.vstack(blocks)


def simplex_grid_min(
    objective: Callable[[np.ndarray], np.ndarray],
    dim: int,
    resolution: float,
) -> Tuple[np.ndarray, float]:
    """Exhaustive minimum of a vectorised objective over the simplex grid.

    ``objective`` maps an (M, dim) array of grid points to M values.
    """
    if dim < 1:
        raise DimensionError(f"Simplex dimension must be positive, got {dim}")
    if dim > MAX_SIMPLEX_DIM:
        raise OracleDomainError(f"Simplex grid search supports dimension <= {MAX_SIMPLEX_DIM}, got {dim}")
    if dim == 1:
        point = np.ones(1)
        return point, float(np.asarray(objective(point[None, :]))[0])
    steps = int(round(1.0 / resolution))
    best_point = np.full(dim, 1.0 / dim)
    best_value = math.inf
    # chunk on the first coordinate to bound memory
    for first in range(steps + 1):
        rest = _compositions(steps - first, dim - 1)
        points = np.hstack([np.full((len(rest), 1), first), rest]) / steps
        values = np.asarray(objective(points), dtype=float)
        idx = int(np.argmin(values))
        if values[idx] < best_value:
            best_value = float(values[idx])
            best_point = points[idx].copy()
    return best_point, best_value


def kl_objective(probs: np.ndarray, losses: np.ndarray, gamma: float) -> Callable[[np.ndarray], np.ndarray]:
    """KL(Π‖P)/γ + Πᵀ L for a batch of Π, with 0·ln 0 = 0."""
    probs = np.asarray(probs, dtype=float)
    losses = np.asarray(losses, dtype=float)

    def evaluate(pi: np.ndarray) -> np.ndarray:
        pi = np.atleast_2d(pi)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(pi > 0.0, pi * np.log(pi / probs), 0.0)
        return terms.sum(axis=1) / gamma + pi @ losses

    return evaluate


def _gate(theta: np.ndarray, x: np.ndarray) -> list:
    logits = [float(row @ x) for row in theta]
    top = max(logits)
    weights = [math.exp(z - top) for z in logits]
    total = sum(weights)
    return [w / total for w in weights]


def enumerate_scenario_probs(tree: ScenarioTree, model: MoEModel, x: np.ndarray) -> np.ndarray:
    """Per-scenario product of gate probabilities along the branching edges."""
    if tree.n_scenarios > MAX_ENUMERATED_SCENARIOS:
        raise OracleDomainError(f"Enumeration limited to {MAX_ENUMERATED_SCENARIOS} scenarios, tree has {tree.n_scenarios}")
    x = np.asarray(x, dtype=float)
    probs = []
    for scenario in tree.scenarios:
        path = list(scenario.ancestors) + [scenario.leaf]
        prob = 1.0
        for parent, child in zip(path[:-1], path[1:]):
            if tree.nodes[parent].stage >= tree.n_branch:
                continue
            prob *= _gate(model.theta, x[parent])[tree.nodes[child].mode - 1]
        probs.append(prob)
    return np.array(probs)


def scenario_cost_sums(
    tree: ScenarioTree,
    node_cost: Callable[[int], float],
) -> np.ndarray:
    """Per-scenario sum of node costs, walking each root-to-leaf path."""
    return np.array(
        [sum(node_cost(i) for i in list(s.ancestors) + [s.leaf]) for s in tree.scenarios]
    )


def batch_lqr_tracking(
    A: np.ndarray,
    B: np.ndarray,
    x0: np.ndarray,
    horizon: int,
    Q: np.ndarray,
    R: np.ndarray,
    Q_f: np.ndarray,
    tracked: Sequence[int],
    refs: np.ndarray | None = None,
) -> np.ndarray:
    """Unconstrained finite-horizon tracking for one linear system, by dense normal equations.

    Returns the (horizon, n_u) optimal inputs.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n_x, n_u = B.shape
    sel = np.eye(n_x)[list(tracked)]
    n_t = sel.shape[0]
    refs = np.zeros((horizon + 1, n_t)) if refs is None else np.asarray(refs, dtype=float)

    # x_k = Phi_k x0 + Gamma_k u for the stacked input u
    H = np.kron(np.eye(horizon), np.asarray(R, dtype=float))
    g = np.zeros(horizon * n_u)
    power = np.eye(n_x)
    gamma_k = np.zeros((n_x, horizon * n_u))
    for k in range(1, horizon + 1):
        gamma_k = A @ gamma_k
        gamma_k[:, (k - 1) * n_u : k * n_u] = B
        power = A @ power
        weight = Q_f if k == horizon else Q
        M = sel @ gamma_k
        offset = sel @ (power @ x0) - refs[k]
        H += M.T @ weight @ M
        g += M.T @ weight @ offset
    return np.linalg.solve(H, -g).reshape(horizon, n_u)


def reference_box_minimize(
    fun: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    w0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    step: float,
    max_iter: int = 1_000_000,
    tol: float = 1e-12,
) -> np.ndarray:
    """Projected gradient with a fixed step; stops once an iteration moves less than ``tol``."""
    w = np.clip(np.asarray(w0, dtype=float), lower, upper)
    for it in range(max_iter):
        _, grad = fun(w)
        nxt = np.clip(w - step * grad, lower, upper)
        if np.max(np.abs(nxt - w), initial=0.0) <= tol:
            return nxt
        w = nxt
    logger.warning("Reference box minimiser hit its iteration cap (%s)", max_iter)
    return w
