from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Tuple

import numpy as np
from scipy import sparse

from riskmm.errors import ConfigurationError, DimensionError
from riskmm.moe_dynamics import MoEModel, TrajectoryBundle
from riskmm.scenario_tree import ScenarioTree

logger = logging.getLogger("riskmm.inner_solver")

SolveStatus = Literal["converged", "max_iterations", "numerical_failure"]
FlatObjective = Callable[[np.ndarray], Tuple[float, np.ndarray]]
BundleObjective = Callable[[TrajectoryBundle], Tuple[float, TrajectoryBundle]]

S_MAX = 100.0
ACTIVE_TOL = 1e-9
FEASIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class StateBox:
    index: int
    lower: float
    upper: float


@dataclass(frozen=True)
class ConstraintSet:
    """Input box and per-coordinate state boxes applied at every non-root node."""

    u_lower: np.ndarray
    u_upper: np.ndarray
    state_boxes: Tuple[StateBox, ...] = ()

    def __post_init__(self) -> None:
        lo = np.asarray(self.u_lower, dtype=float)
        hi = np.asarray(self.u_upper, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ConfigurationError("Input bounds must have equal shapes with lower <= upper")
        for box in self.state_boxes:
            if box.lower > box.upper:
                raise ConfigurationError(f"State box on coordinate {box.index} has lower > upper")
        object.__setattr__(self, "u_lower", lo)
        object.__setattr__(self, "u_upper", hi)
        object.__setattr__(self, "state_boxes", tuple(self.state_boxes))

    @classmethod
    def unconstrained(cls, n_u: int) -> "ConstraintSet":
        return cls(u_lower=np.full(n_u, -np.inf), u_upper=np.full(n_u, np.inf))

    def state_violation(self, x: np.ndarray) -> float:
        worst = 0.0
        for box in self.state_boxes:
            col = np.atleast_2d(x)[:, box.index]
            worst = max(worst, float(np.max(box.lower - col, initial=0.0)), float(np.max(col - box.upper, initial=0.0)))
        return worst


@dataclass(frozen=True)
class CondensedProblem:
    """Node states as affine maps of the stacked inputs: vec(x) = E w + vec(e).

    ``C``/``c0`` select the boxed state coordinates of every non-root node.
    """

    tree: ScenarioTree
    model: MoEModel
    x_t: np.ndarray
    E: sparse.csr_matrix
    e: np.ndarray
    w_lower: np.ndarray
    w_upper: np.ndarray
    C: sparse.csr_matrix
    c0: np.ndarray
    c_lower: np.ndarray
    c_upper: np.ndarray

    @property
    def n_w(self) -> int:
        return self.E.shape[1]

    def states(self, w: np.ndarray) -> np.ndarray:
        return (self.E @ w).reshape(self.e.shape) + self.e

    def trajectory(self, w: np.ndarray) -> TrajectoryBundle:
        return TrajectoryBundle(x=self.states(w), u=w.reshape(self.tree.n_inner, self.model.n_u).copy())

    def stack(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float).ravel().copy()

    def pull_back(self, grad: TrajectoryBundle) -> np.ndarray:
        return self.E.T @ grad.x.ravel() + grad.u.ravel()

    def constraint_values(self, w: np.ndarray) -> np.ndarray:
        return self.C @ w + self.c0

    def constraint_violation(self, w: np.ndarray) -> float:
        if self.C.shape[0] == 0:
            return 0.0
        c = self.constraint_values(w)
        return float(max(np.max(self.c_lower - c, initial=0.0), np.max(c - self.c_upper, initial=0.0)))


def condense(
    tree: ScenarioTree,
    model: MoEModel,
    x_t: np.ndarray,
    constraints: ConstraintSet | None = None,
) -> CondensedProblem:
    model.check_tree(tree)
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape != (model.n_x,):
        raise DimensionError(f"Measured state has shape {x_t.shape}, model expects ({model.n_x},)")
    constraints = constraints or ConstraintSet.unconstrained(model.n_u)
    if constraints.u_lower.shape != (model.n_u,):
        raise DimensionError(f"Input bounds have shape {constraints.u_lower.shape}, model expects ({model.n_u},)")
    n_x, n_u = model.n_x, model.n_u

    # per node: ancestor ids and the dense block mapping their inputs to the node state
    paths: List[List[int]] = [[]]
    blocks: List[np.ndarray] = [np.zeros((n_x, 0))]
    e = np.empty((tree.n_nodes, n_x))
    e[0] = x_t
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    for node in tree.nodes[1:]:
        parent = node.parent
        A = model.A[node.mode - 1]
        B = model.B[node.mode - 1]
        block = np.hstack([A @ blocks[parent], B])
        path = paths[parent] + [parent]
        paths.append(path)
        blocks.append(block)
        e[node.id] = A @ e[parent]

        col_idx = (np.asarray(path)[:, None] * n_u + np.arange(n_u)).ravel()
        r, c = np.meshgrid(node.id * n_x + np.arange(n_x), col_idx, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(block.ravel())

    n_w = tree.n_inner * n_u
    E = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(tree.n_nodes * n_x, n_w),
    )
    E.eliminate_zeros()

    sel_rows: List[int] = []
    c_lower: List[float] = []
    c_upper: List[float] = []
    for node_id in range(1, tree.n_nodes):
        for box in constraints.state_boxes:
            sel_rows.append(node_id * n_x + box.index)
            c_lower.append(box.lower)
            c_upper.append(box.upper)
    C = E[sel_rows] if sel_rows else sparse.csr_matrix((0, n_w))
    c0 = e.ravel()[sel_rows] if sel_rows else np.zeros(0)

    return CondensedProblem(
        tree=tree,
        model=model,
        x_t=x_t.copy(),
        E=E,
        e=e,
        w_lower=np.tile(constraints.u_lower, tree.n_inner),
        w_upper=np.tile(constraints.u_upper, tree.n_inner),
        C=sparse.csr_matrix(C),
        c0=np.asarray(c0, dtype=float),
        c_lower=np.asarray(c_lower, dtype=float),
        c_upper=np.asarray(c_upper, dtype=float),
    )


def bound_multipliers(
    w: np.ndarray,
    gradient: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    active_tol: float = ACTIVE_TOL,
) -> Tuple[np.ndarray, np.ndarray]:
    """Least-residual multipliers of active bounds for the stationarity g − z_L + z_U = 0."""
    at_lower = np.isfinite(lower) & (w - lower <= active_tol)
    at_upper = np.isfinite(upper) & (upper - w <= active_tol)
    z_lower = np.where(at_lower, np.maximum(gradient, 0.0), 0.0)
    z_upper = np.where(at_upper, np.maximum(-gradient, 0.0), 0.0)
    return z_lower, z_upper


def optimality_error(
    w: np.ndarray,
    gradient: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    z_lower: np.ndarray,
    z_upper: np.ndarray,
    constraint_violation: float = 0.0,
    constraint_complementarity: float = 0.0,
    constraint_multipliers: np.ndarray | None = None,
) -> float:
    """Scaled KKT residual: max of dual infeasibility / s_d, primal infeasibility and complementarity.

    ``gradient`` is the gradient of the Lagrangian with respect to everything
    except the variable bounds, whose multipliers are ``z_lower``/``z_upper``.
    s_d = max(s_max, mean |multiplier|) / s_max with s_max = 100.
    """
    multipliers = [z_lower, z_upper]
    if constraint_multipliers is not None:
        multipliers.append(constraint_multipliers)
    stacked = np.concatenate([np.abs(m).ravel() for m in multipliers])
    mean_mult = float(stacked.mean()) if stacked.size else 0.0
    s_d = max(S_MAX, mean_mult) / S_MAX

    stationarity = float(np.max(np.abs(gradient - z_lower + z_upper), initial=0.0)) / s_d
    bound_violation = float(max(np.max(lower - w, initial=0.0), np.max(w - upper, initial=0.0)))
    slack_lower = np.where(np.isfinite(lower), w - lower, 0.0)
    slack_upper = np.where(np.isfinite(upper), upper - w, 0.0)
    complementarity = float(max(np.max(np.abs(slack_lower * z_lower), initial=0.0), np.max(np.abs(slack_upper * z_upper), initial=0.0)))
    return max(
        stationarity,
        bound_violation,
        constraint_violation,
        max(complementarity, constraint_complementarity) / s_d,
    )


def _box_error(w: np.ndarray, g: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> float:
    z_lower, z_upper = bound_multipliers(w, g, lower, upper)
    return optimality_error(w, g, lower, upper, z_lower, z_upper)


@dataclass
class BoxResult:
    w: np.ndarray
    value: float
    gradient: np.ndarray
    error: float
    iterations: int
    status: SolveStatus


def _evaluate(fun: FlatObjective, w: np.ndarray) -> Tuple[float, np.ndarray]:
    with np.errstate(over="ignore", invalid="ignore"):
        value, grad = fun(w)
    return float(value), np.asarray(grad, dtype=float)


def projected_gradient(
    fun: FlatObjective,
    w0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    tol: float = 1e-4,
    max_iter: int = 5000,
    armijo: float = 1e-4,
    step_bounds: Tuple[float, float] = (1e-12, 1e6),
) -> BoxResult:
    """Spectral projected gradient on a box: Barzilai-Borwein trial step, monotone Armijo backtracking."""
    w = np.clip(np.asarray(w0, dtype=float), lower, upper)
    value, grad = _evaluate(fun, w)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        return BoxResult(w, value, grad, np.inf, 0, "numerical_failure")

    alpha = 1.0 / max(1.0, float(np.max(np.abs(grad), initial=0.0)))
    for it in range(max_iter):
        error = _box_error(w, grad, lower, upper)
        if error <= tol:
            return BoxResult(w, value, grad, error, it, "converged")

        direction = np.clip(w - alpha * grad, lower, upper) - w
        slope = float(grad @ direction)
        if slope >= 0.0:
            direction = np.clip(w - grad, lower, upper) - w
            slope = float(grad @ direction)

        t = 1.0
        accepted = False
        for _ in range(60):
            candidate = w + t * direction
            cand_value, cand_grad = _evaluate(fun, candidate)
            if np.isfinite(cand_value) and cand_value <= value + armijo * t * slope:
                accepted = np.all(np.isfinite(cand_grad))
                break
            t *= 0.5
        if not accepted:
            logger.debug("Line search stalled at iteration %s (error %.3e)", it, error)
            return BoxResult(w, value, grad, error, it, "max_iterations")

        s = candidate - w
        if not np.any(s):
            return BoxResult(w, value, grad, error, it, "max_iterations")
        y = cand_grad - grad
        sy = float(s @ y)
        alpha = float(np.clip(float(s @ s) / sy, *step_bounds)) if sy > 0 else step_bounds[1]
        w, value, grad = candidate, cand_value, cand_grad

    error = _box_error(w, grad, lower, upper)
    status: SolveStatus = "converged" if error <= tol else "max_iterations"
    return BoxResult(w, value, grad, error, max_iter, status)


@dataclass
class SolveOutcome:
    w: np.ndarray
    trajectory: TrajectoryBundle
    value: float
    optimality_error: float
    iterations: int
    status: SolveStatus
    lam_lower: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam_upper: np.ndarray = field(default_factory=lambda: np.zeros(0))


def kkt_error(
    problem: CondensedProblem,
    w: np.ndarray,
    grad_w: np.ndarray,
    lam_lower: np.ndarray,
    lam_upper: np.ndarray,
) -> float:
    """Optimality error of ``min f(w)`` over C(x_t), given ∇f and state-box multipliers."""
    lagrangian_grad = grad_w
    violation = 0.0
    complementarity = 0.0
    state_mult = None
    if problem.C.shape[0]:
        lagrangian_grad = grad_w + problem.C.T @ (lam_upper - lam_lower)
        c = problem.constraint_values(w)
        violation = problem.constraint_violation(w)
        complementarity = float(
            max(
                np.max(np.abs(lam_lower * (c - problem.c_lower)), initial=0.0),
                np.max(np.abs(lam_upper * (problem.c_upper - c)), initial=0.0),
            )
        )
        state_mult = np.concatenate([lam_lower, lam_upper])
    z_lower, z_upper = bound_multipliers(w, lagrangian_grad, problem.w_lower, problem.w_upper)
    return optimality_error(
        w,
        lagrangian_grad,
        problem.w_lower,
        problem.w_upper,
        z_lower,
        z_upper,
        constraint_violation=violation,
        constraint_complementarity=complementarity,
        constraint_multipliers=state_mult,
    )


def solve(
    problem: CondensedProblem,
    objective: BundleObjective,
    w0: np.ndarray,
    tol: float = 1e-4,
    max_iter: int = 5000,
    max_outer: int = 30,
    rho_init: float = 10.0,
    feasibility_tol: float = FEASIBILITY_TOL,
) -> SolveOutcome:
    """Minimise a convex objective of the tree trajectory over C(x_t).

    Inputs are kept in their box by projection; state boxes are enforced by
    augmented-Lagrangian outer loops (penalty x10 whenever the violation does
    not halve).
    """
    w0 = np.clip(np.asarray(w0, dtype=float), problem.w_lower, problem.w_upper)

    def f(w: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = objective(problem.trajectory(w))
        return value, problem.pull_back(grad)

    f0, _ = _evaluate(f, w0)
    if not np.isfinite(f0):
        return SolveOutcome(w0, problem.trajectory(w0), f0, np.inf, 0, "numerical_failure")

    n_c = problem.C.shape[0]
    lam_lower = np.zeros(n_c)
    lam_upper = np.zeros(n_c)

    if n_c == 0:
        res = projected_gradient(f, w0, problem.w_lower, problem.w_upper, tol, max_iter)
        outcome = SolveOutcome(res.w, problem.trajectory(res.w), res.value, res.error, res.iterations, res.status, lam_lower, lam_upper)
        return _safeguard(problem, outcome, w0, f0, feasibility_tol)

    rho = rho_init
    w = w0
    total_iters = 0
    prev_violation = problem.constraint_violation(w0)
    status: SolveStatus = "max_iterations"
    value, error = f0, np.inf
    for outer in range(max_outer):

        def augmented(w_: np.ndarray, rho=rho, lam_lo=lam_lower, lam_hi=lam_upper) -> Tuple[float, np.ndarray]:
            base, grad = f(w_)
            c = problem.constraint_values(w_)
            shift_lo = np.maximum(0.0, lam_lo + rho * (problem.c_lower - c))
            shift_hi = np.maximum(0.0, lam_hi + rho * (c - problem.c_upper))
            penalty = (shift_lo @ shift_lo - lam_lo @ lam_lo + shift_hi @ shift_hi - lam_hi @ lam_hi) / (2.0 * rho)
            return base + penalty, grad + problem.C.T @ (shift_hi - shift_lo)

        res = projected_gradient(augmented, w, problem.w_lower, problem.w_upper, tol, max_iter)
        total_iters += res.iterations
        if res.status == "numerical_failure":
            status = "numerical_failure"
            break
        w = res.w
        c = problem.constraint_values(w)
        lam_lower = np.maximum(0.0, lam_lower + rho * (problem.c_lower - c))
        lam_upper = np.maximum(0.0, lam_upper + rho * (c - problem.c_upper))

        value, grad_f = _evaluate(f, w)
        violation = problem.constraint_violation(w)
        error = kkt_error(problem, w, grad_f, lam_lower, lam_upper)
        logger.debug("AL outer %s: value %.6g violation %.2e error %.2e rho %.0e", outer, value, violation, error, rho)
        if error <= tol and violation <= feasibility_tol:
            status = "converged"
            break
        if violation > 0.5 * prev_violation:
            rho *= 10.0
        prev_violation = violation

    outcome = SolveOutcome(w, problem.trajectory(w), value, error, total_iters, status, lam_lower, lam_upper)
    return _safeguard(problem, outcome, w0, f0, feasibility_tol)


def _safeguard(problem: CondensedProblem, outcome: SolveOutcome, w0: np.ndarray, f0: float, feasibility_tol: float) -> SolveOutcome:
    """Never return a point worse than a feasible warm start."""
    if outcome.status == "numerical_failure":
        return outcome
    if outcome.value > f0 + 1e-12 and problem.constraint_violation(w0) <= feasibility_tol:
        logger.debug("Inner solve ended above its feasible warm start; returning the warm start")
        outcome.w = w0
        outcome.trajectory = problem.trajectory(w0)
        outcome.value = f0
        outcome.status = "max_iterations"
    return outcome
