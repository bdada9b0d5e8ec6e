from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import List, Literal, Tuple

import numpy as np

from riskmm.errors import ConfigurationError, InfeasibleStateError, NonSmoothPointError, SolverError
from riskmm.inner_solver import FEASIBILITY_TOL, ConstraintSet, CondensedProblem, condense, kkt_error, solve
from riskmm.moe_dynamics import MoEModel, TrajectoryBundle, sample_mode, step
from riskmm.objective import CostSpec, RiskConfig, RiskObjective
from riskmm.scenario_tree import ScenarioTree
from riskmm.surrogates import SurrogateObjective, expansion_params

logger = logging.getLogger("riskmm.mm_controller")

OCPFormulation = Literal["optimistic", "pessimistic", "neutral_proxy"]
MMStatus = Literal["converged", "max_iterations", "stalled"]


@dataclass(frozen=True)
class MMConfig:
    eps_tol: float = 0.003
    max_mm_iters: int = 50
    loss_decrease_tol: float | None = None
    inner_tol: float = 1e-4
    inner_max_iters: int = 5000
    neutral_gamma: float = 1e-3
    descent_slack: float = 1e-8

    def __post_init__(self) -> None:
        positive = {
            "eps_tol": self.eps_tol,
            "inner_tol": self.inner_tol,
            "neutral_gamma": self.neutral_gamma,
            "descent_slack": self.descent_slack,
        }
        if self.loss_decrease_tol is not None:
            positive["loss_decrease_tol"] = self.loss_decrease_tol
        for name, value in positive.items():
            if not value > 0:
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if self.max_mm_iters < 1 or self.inner_max_iters < 1:
            raise ConfigurationError("Iteration limits must be at least 1")


@dataclass
class MMIteration:
    m: int
    loss: float
    expected_loss: float
    surrogate: float
    optimality_error: float
    inner_iterations: int
    wall_ms: float


@dataclass
class SolverReport:
    formulation: OCPFormulation
    gamma: float
    iterations: List[MMIteration] = field(default_factory=list)
    status: MMStatus = "max_iterations"
    total_inner_iterations: int = 0

    @property
    def final_loss(self) -> float:
        return self.iterations[-1].loss if self.iterations else float("nan")

    @property
    def final_error(self) -> float:
        return self.iterations[-1].optimality_error if self.iterations else float("inf")

    @property
    def mm_iterations(self) -> int:
        return max(0, len(self.iterations) - 1)


def _variant_and_gamma(formulation: OCPFormulation, risk: RiskConfig | None, cfg: MMConfig) -> Tuple[str, float]:
    if formulation == "neutral_proxy":
        return "optimistic", cfg.neutral_gamma
    if formulation not in ("optimistic", "pessimistic"):
        raise ConfigurationError(f"Unknown OCP formulation '{formulation}'")
    if risk is None:
        raise ConfigurationError(f"The {formulation} formulation needs a risk configuration")
    return formulation, risk.gamma


def _true_error(
    problem: CondensedProblem,
    objective: RiskObjective,
    w: np.ndarray,
    lam_lower: np.ndarray,
    lam_upper: np.ndarray,
) -> float:
    try:
        _, grad = objective(problem.trajectory(w))
    except NonSmoothPointError:
        return float("inf")
    return kkt_error(problem, w, problem.pull_back(grad), lam_lower, lam_upper)


def solve_ocp(
    formulation: OCPFormulation,
    x_t: np.ndarray,
    tree: ScenarioTree,
    model: MoEModel,
    spec: CostSpec,
    risk: RiskConfig | None,
    cfg: MMConfig,
    initial_guess: np.ndarray | None = None,
    constraints: ConstraintSet | None = None,
) -> Tuple[TrajectoryBundle, SolverReport]:
    """Majorization-minimization for the optimistic / pessimistic OCP.

    Each iteration expands the matching convex majorizer at the current
    iterate and minimises it over C(x_t). Termination uses the optimality
    error of the true loss; a non-descending inner result ends the run as
    ``stalled`` and the previous iterate is kept.
    """
    variant, gamma = _variant_and_gamma(formulation, risk, cfg)
    x_t = np.asarray(x_t, dtype=float)
    constraints = constraints or ConstraintSet.unconstrained(model.n_u)
    if constraints.state_violation(x_t) > FEASIBILITY_TOL:
        raise InfeasibleStateError(f"Measured state {x_t.tolist()} lies outside the state constraints")

    problem = condense(tree, model, x_t, constraints)
    guess = np.zeros((tree.n_inner, model.n_u)) if initial_guess is None else np.asarray(initial_guess, dtype=float)
    w = np.clip(problem.stack(guess), problem.w_lower, problem.w_upper)
    true_objective = RiskObjective(RiskConfig(gamma=gamma, formulation=variant), tree, model, spec, x_t)
    lam_lower = np.zeros(problem.C.shape[0])
    lam_upper = np.zeros(problem.C.shape[0])

    report = SolverReport(formulation=formulation, gamma=gamma)
    started = time.perf_counter()
    traj = problem.trajectory(w)
    loss = true_objective.value(traj)
    error = _true_error(problem, true_objective, w, lam_lower, lam_upper)
    report.iterations.append(
        MMIteration(0, loss, true_objective.expected(traj), loss, error, 0, (time.perf_counter() - started) * 1e3)
    )

    for m in range(1, cfg.max_mm_iters + 1):
        if error <= cfg.eps_tol:
            report.status = "converged"
            break
        iter_start = time.perf_counter()
        params = expansion_params(variant, gamma, tree, model, spec, traj, x_t)
        surrogate = SurrogateObjective(tree, model, spec, params, x_t)
        outcome = solve(problem, surrogate, w, cfg.inner_tol, cfg.inner_max_iters)
        report.total_inner_iterations += outcome.iterations
        if outcome.status == "numerical_failure":
            raise SolverError(f"Inner solve failed at MM iteration {m}", report)

        new_loss = true_objective.value(outcome.trajectory)
        if not np.isfinite(new_loss) or new_loss > loss + cfg.descent_slack:
            logger.warning("MM descent stalled at iteration %s: %.9g -> %.9g", m, loss, new_loss)
            report.status = "stalled"
            break
        decrease = loss - new_loss
        w, traj, loss = outcome.w, outcome.trajectory, new_loss
        lam_lower, lam_upper = outcome.lam_lower, outcome.lam_upper
        error = _true_error(problem, true_objective, w, lam_lower, lam_upper)
        report.iterations.append(
            MMIteration(
                m,
                loss,
                true_objective.expected(traj),
                outcome.value,
                error,
                outcome.iterations,
                (time.perf_counter() - iter_start) * 1e3,
            )
        )
        logger.debug("MM %s: loss %.6f error %.3e inner %s (%s)", m, loss, error, outcome.iterations, outcome.status)
        if cfg.loss_decrease_tol is not None and decrease <= cfg.loss_decrease_tol:
            report.status = "converged"
            break
    else:
        report.status = "converged" if error <= cfg.eps_tol else "max_iterations"

    logger.debug(
        "%s solve (gamma=%g): %s MM iterations, loss %.6f, status %s",
        formulation,
        gamma,
        report.mm_iterations,
        loss,
        report.status,
    )
    return traj, report


def shift_inputs(tree: ScenarioTree, u: np.ndarray, realized_mode: int) -> np.ndarray:
    """Warm start for the next MPC step: follow the subtree of the realised mode.

    A new node at stage k takes the input of the old stage-(k+1) node with
    the same mode history; nodes whose counterpart is an old leaf copy their
    parent's new input.
    """
    root_children = tree.nodes[0].children
    first = next((c for c in root_children if tree.nodes[c].mode == realized_mode), root_children[0])
    old_of = np.empty(tree.n_nodes, dtype=int)
    old_of[0] = first
    shifted = np.empty_like(u)
    for node in tree.nodes:
        if node.id:
            counterpart = old_of[node.parent]
            children = tree.nodes[counterpart].children
            if not children:
                old_of[node.id] = counterpart
            else:
                old_of[node.id] = next((c for c in children if tree.nodes[c].mode == node.mode), children[0])
        if node.id < tree.n_inner:
            source = old_of[node.id]
            shifted[node.id] = u[source] if source < tree.n_inner else shifted[node.parent]
    return shifted


@dataclass
class MPCStep:
    u0: np.ndarray
    mode: int
    x_next: np.ndarray
    report: SolverReport
    solve_ms: float


class MPCController:
    """Receding-horizon controller holding the warm start between steps."""

    def __init__(
        self,
        tree: ScenarioTree,
        model: MoEModel,
        spec: CostSpec,
        constraints: ConstraintSet,
        formulation: OCPFormulation,
        risk: RiskConfig | None,
        cfg: MMConfig,
    ) -> None:
        self.tree = tree
        self.model = model
        self.spec = spec
        self.constraints = constraints
        self.formulation = formulation
        self.risk = risk
        self.cfg = cfg
        self.warm_start: np.ndarray | None = None

    def solve(self, x_t: np.ndarray) -> Tuple[TrajectoryBundle, SolverReport]:
        return solve_ocp(
            self.formulation,
            x_t,
            self.tree,
            self.model,
            self.spec,
            self.risk,
            self.cfg,
            initial_guess=self.warm_start,
            constraints=self.constraints,
        )

    def step(self, x_t: np.ndarray, rng: np.random.Generator) -> MPCStep:
        started = time.perf_counter()
        traj, report = self.solve(x_t)
        solve_ms = (time.perf_counter() - started) * 1e3
        u0 = np.clip(traj.u[0], self.constraints.u_lower, self.constraints.u_upper)
        mode = sample_mode(self.model, x_t, rng)
        x_next = step(self.model, x_t, u0, mode)
        self.warm_start = shift_inputs(self.tree, traj.u, mode)
        return MPCStep(u0=u0, mode=mode, x_next=x_next, report=report, solve_ms=solve_ms)


def mpc_step(controller: MPCController, x_t: np.ndarray, rng: np.random.Generator) -> MPCStep:
    return controller.step(x_t, rng)


@dataclass
class ClosedLoopTrace:
    states: np.ndarray
    inputs: np.ndarray
    modes: np.ndarray
    reports: List[SolverReport]
    solve_ms: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.modes)


def run_closed_loop(
    controller: MPCController,
    x0: np.ndarray,
    steps: int,
    rng: np.random.Generator,
) -> ClosedLoopTrace:
    if steps < 0:
        raise ConfigurationError(f"Step count must be non-negative, got {steps}")
    x = np.asarray(x0, dtype=float)
    states = [x]
    inputs: List[np.ndarray] = []
    modes: List[int] = []
    reports: List[SolverReport] = []
    solve_ms: List[float] = []
    for _ in range(steps):
        result = controller.step(x, rng)
        inputs.append(result.u0)
        modes.append(result.mode)
        reports.append(result.report)
        solve_ms.append(result.solve_ms)
        x = result.x_next
        states.append(x)
    return ClosedLoopTrace(
        states=np.asarray(states),
        inputs=np.asarray(inputs).reshape(steps, controller.model.n_u),
        modes=np.asarray(modes, dtype=int),
        reports=reports,
        solve_ms=np.asarray(solve_ms),
    )
