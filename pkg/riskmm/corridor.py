from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from riskmm.errors import ConfigurationError, RiskMMError, SolverError
from riskmm.inner_solver import ConstraintSet, StateBox
from riskmm.mm_controller import ClosedLoopTrace, MMConfig, MPCController, SolverReport, run_closed_loop, solve_ocp
from riskmm.moe_dynamics import MoEModel, TrajectoryBundle
from riskmm.objective import CollisionPenalty, CorridorReference, CostSpec, RiskConfig
from riskmm.scenario_tree import ScenarioTree, build_tree

logger = logging.getLogger("riskmm.corridor")

N_STATE = 7
N_INPUT = 2
COLLISION_DISTANCE_M = 0.1

# (p_x, p_y, v_x, v_y, p_x^h, p_y^h, 1)
PX, PY, VX, VY, PXH, PYH, CONST = range(N_STATE)

# gate input (p_x - p_x^h, p_y - p_y^h, 1) as a read-out of the joint state
GATE_READOUT = np.array(
    [
        [1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    ]
)

CorridorFormulation = Literal["optimistic", "pessimistic", "neutral_proxy"]
Pair = Tuple[float, float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


class CollisionConfig(_Strict):
    alpha: float = Field(500.0, gt=0)
    beta: float = Field(5.0, gt=0)
    kind: Literal["exp_norm", "exp_sq_norm", "inverse_power"] = "exp_norm"
    power: float = Field(1.0, gt=0)


class HumanInitConfig(_Strict):
    p_x_range_m: Pair = (1.5, 2.5)
    p_y_range_m: Pair = (-0.5, 0.5)
    # overrides the sampler when set
    fixed_position_m: Optional[Pair] = None


class MMSettings(_Strict):
    eps_tol: float = Field(0.003, gt=0)
    max_mm_iters: int = Field(50, ge=1)
    loss_decrease_tol: Optional[float] = Field(None, gt=0)
    inner_tol: float = Field(1e-4, gt=0)
    inner_max_iters: int = Field(5000, ge=1)
    neutral_gamma: float = Field(1e-3, gt=0)

    def to_mm_config(self, max_mm_iters: int | None = None) -> MMConfig:
        return MMConfig(
            eps_tol=self.eps_tol,
            max_mm_iters=max_mm_iters or self.max_mm_iters,
            loss_decrease_tol=self.loss_decrease_tol,
            inner_tol=self.inner_tol,
            inner_max_iters=self.inner_max_iters,
            neutral_gamma=self.neutral_gamma,
        )


class CorridorConfig(_Strict):
    """Robot passing a human in a corridor; every numeric field carries its unit."""

    dt_s: float = Field(0.1, gt=0)
    u_lower_mps2: Pair = (-1.0, -0.6)
    u_upper_mps2: Pair = (1.0, 0.6)
    p_y_bounds_m: Pair = (-1.5, 1.5)
    v_x_bounds_mps: Pair = (0.0, 1.5)
    v_y_bounds_mps: Pair = (-1.0, 1.0)
    v_x_max_mps: float = 1.5
    v_h_x_mps: float = -0.8
    human_y_gain_per_s: float = Field(0.3, ge=0)
    y_refs_m: Tuple[float, float, float] = (0.0, -1.0, 1.0)
    theta: List[List[float]] = Field(
        default_factory=lambda: [[-5.0, -1.0, -1.0], [0.0, 1.0, -1.0], [-12.5, 0.0, 0.0]]
    )
    q_diag: Tuple[float, float, float, float] = (50.0, 50.0, 2.0, 2.0)
    r_diag: Pair = (2.0, 2.0)
    q_f_scale: float = Field(5.0, ge=0)
    collision: CollisionConfig = Field(default_factory=CollisionConfig)
    horizon: int = Field(15, ge=1)
    n_branch: int = Field(2, ge=0)
    gamma: float = Field(1.0, gt=0)
    formulation: CorridorFormulation = "optimistic"
    robot_init: Tuple[float, float, float, float] = (-3.0, 0.0, 0.0, 0.0)
    open_loop_state: Tuple[float, float, float, float, float, float] = (-2.5, 0.0, 1.0, 0.0, 1.0, 0.2)
    human_init: HumanInitConfig = Field(default_factory=HumanInitConfig)
    steps: int = Field(100, ge=0)
    repeats: int = Field(10, ge=1)
    seed: int = 0
    random_init: bool = False
    # None runs every MPC step to eps_tol
    mpc_max_mm_iters: Optional[int] = Field(1, ge=1)
    mm: MMSettings = Field(default_factory=MMSettings)

    @model_validator(mode="after")
    def _check_consistency(self) -> "CorridorConfig":
        if len(self.theta) != 3 or any(len(row) != 3 for row in self.theta):
            raise ValueError("theta must be 3 x 3: one row per mode over (dp_x, dp_y, 1)")
        if self.n_branch > self.horizon:
            raise ValueError(f"n_branch ({self.n_branch}) must not exceed horizon ({self.horizon})")
        for name in ("u", "p_y", "v_x", "v_y"):
            lo, hi = self._bounds(name)
            if np.any(np.asarray(lo) > np.asarray(hi)):
                raise ValueError(f"{name} bounds have lower > upper")
        if any(v < 0 for v in self.q_diag + self.r_diag):
            raise ValueError("Cost weights must be non-negative")
        return self

    def _bounds(self, name: str) -> Tuple[Any, Any]:
        if name == "u":
            return self.u_lower_mps2, self.u_upper_mps2
        return getattr(self, {"p_y": "p_y_bounds_m", "v_x": "v_x_bounds_mps", "v_y": "v_y_bounds_mps"}[name])

    @property
    def d(self) -> int:
        return len(self.theta)


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> Tuple[List[str], Any]:
    """``a.b=value``; the value is read as JSON and falls back to a plain string."""
    path, sep, raw = text.partition("=")
    if not sep or not path.strip():
        raise ConfigurationError(f"Override '{text}' is not of the form dot.path=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip().split("."), value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    data = json.loads(json.dumps(data))
    for text in overrides:
        keys, value = parse_override(text)
        target = data
        for key in keys[:-1]:
            if not isinstance(target.get(key), dict):
                raise ConfigurationError(f"Unknown config section '{key}' in override '{text}'")
            target = target[key]
        if keys[-1] not in target:
            raise ConfigurationError(f"Unknown config field '{'.'.join(keys)}'")
        target[keys[-1]] = value
    return data


def config_from_dict(payload: Dict[str, Any] | None = None, overrides: Sequence[str] = ()) -> CorridorConfig:
    """Defaults, deep-merged with a partial config document, then dot-path overrides."""
    data = CorridorConfig().model_dump(mode="json")
    if payload:
        data = _deep_merge(data, payload)
    data = apply_overrides(data, overrides)
    try:
        return CorridorConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"Invalid corridor configuration:\n{exc}") from exc


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> CorridorConfig:
    if path is None:
        return config_from_dict(None, overrides)
    try:
        loaded = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"Cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ConfigurationError(f"Config file {path} must hold a JSON object")
    return config_from_dict(loaded, overrides)


def dump_config(config: CorridorConfig) -> str:
    return config.model_dump_json(indent=2)


def build_model(config: CorridorConfig) -> MoEModel:
    """Per-mode joint dynamics: Euler double integrator for the robot, human driven through the constant coordinate."""
    dt = config.dt_s
    gain = config.human_y_gain_per_s
    A = np.zeros((config.d, N_STATE, N_STATE))
    B = np.zeros((config.d, N_STATE, N_INPUT))
    for i, y_ref in enumerate(config.y_refs_m):
        a = np.eye(N_STATE)
        a[PX, VX] = dt
        a[PY, VY] = dt
        a[PXH, CONST] = config.v_h_x_mps * dt
        a[PYH, PYH] = 1.0 - gain * dt
        a[PYH, CONST] = gain * dt * y_ref
        A[i] = a
        B[i, VX, 0] = dt
        B[i, VY, 1] = dt
    theta = np.asarray(config.theta, dtype=float) @ GATE_READOUT
    return MoEModel(theta=theta, A=A, B=B)


def build_cost(config: CorridorConfig) -> CostSpec:
    Q = np.diag(config.q_diag)
    collision = CollisionPenalty(
        alpha=config.collision.alpha,
        beta=config.collision.beta,
        selector=GATE_READOUT[:2],
        kind=config.collision.kind,
        power=config.collision.power,
    )
    return CostSpec(
        Q=Q,
        R=np.diag(config.r_diag),
        Q_f=config.q_f_scale * Q,
        tracked=(PX, PY, VX, VY),
        reference=CorridorReference(v_max=config.v_x_max_mps, dt=config.dt_s, px_index=PX),
        collision=collision,
    )


def build_constraints(config: CorridorConfig) -> ConstraintSet:
    return ConstraintSet(
        u_lower=np.asarray(config.u_lower_mps2, dtype=float),
        u_upper=np.asarray(config.u_upper_mps2, dtype=float),
        state_boxes=(
            StateBox(PY, *config.p_y_bounds_m),
            StateBox(VX, *config.v_x_bounds_mps),
            StateBox(VY, *config.v_y_bounds_mps),
        ),
    )


@dataclass(frozen=True)
class CorridorProblem:
    config: CorridorConfig
    tree: ScenarioTree
    model: MoEModel
    spec: CostSpec
    constraints: ConstraintSet

    @property
    def risk(self) -> RiskConfig | None:
        if self.config.formulation == "neutral_proxy":
            return None
        return RiskConfig(gamma=self.config.gamma, formulation=self.config.formulation)

    def controller(self) -> MPCController:
        cfg = self.config.mm.to_mm_config(self.config.mpc_max_mm_iters)
        return MPCController(self.tree, self.model, self.spec, self.constraints, self.config.formulation, self.risk, cfg)


def build_problem(config: CorridorConfig) -> CorridorProblem:
    return CorridorProblem(
        config=config,
        tree=build_tree(config.d, config.horizon, config.n_branch),
        model=build_model(config),
        spec=build_cost(config),
        constraints=build_constraints(config),
    )


def human_position(config: CorridorConfig, rng: np.random.Generator) -> np.ndarray:
    init = config.human_init
    if init.fixed_position_m is not None:
        return np.asarray(init.fixed_position_m, dtype=float)
    return np.array([rng.uniform(*init.p_x_range_m), rng.uniform(*init.p_y_range_m)])


def initial_state(config: CorridorConfig, rng: np.random.Generator) -> np.ndarray:
    return np.concatenate([config.robot_init, human_position(config, rng), [1.0]])


def open_loop_state(config: CorridorConfig) -> np.ndarray:
    return np.concatenate([config.open_loop_state, [1.0]])


def initial_guess(
    config: CorridorConfig,
    tree: ScenarioTree,
    rng: np.random.Generator | None = None,
    random: bool = False,
) -> np.ndarray:
    if not random:
        return np.zeros((tree.n_inner, N_INPUT))
    rng = rng or np.random.default_rng(config.seed)
    return rng.uniform(config.u_lower_mps2, config.u_upper_mps2, size=(tree.n_inner, N_INPUT))


def solve_open_loop(config: CorridorConfig, random_init: bool | None = None) -> Tuple[TrajectoryBundle, SolverReport]:
    problem = build_problem(config)
    random_init = config.random_init if random_init is None else random_init
    guess = initial_guess(config, problem.tree, np.random.default_rng(config.seed), random=random_init)
    traj, report = solve_ocp(
        config.formulation,
        open_loop_state(config),
        problem.tree,
        problem.model,
        problem.spec,
        problem.risk,
        config.mm.to_mm_config(),
        initial_guess=guess,
        constraints=problem.constraints,
    )
    logger.info(
        "Open-loop %s solve (gamma=%g, N=%s, N_b=%s): %s MM iterations, loss %.4f, E[L] %.4f, status %s",
        config.formulation,
        report.gamma,
        config.horizon,
        config.n_branch,
        report.mm_iterations,
        report.final_loss,
        report.iterations[-1].expected_loss,
        report.status,
    )
    return traj, report


@dataclass(frozen=True)
class GuessResult:
    seed: int
    report: SolverReport | None


def solve_random_guesses(config: CorridorConfig, guesses: int) -> List[GuessResult]:
    """Open-loop solves from ``guesses`` seeded random initial inputs (seeds ``config.seed + i``).

    A solver failure is recorded as a missing report; an infeasible state or bad config still raises.
    """
    if guesses < 1:
        raise ConfigurationError(f"Need at least one initial guess, got {guesses}")
    results = []
    for seed in (config.seed + i for i in range(guesses)):
        try:
            _, report = solve_open_loop(config.model_copy(update={"seed": seed}), random_init=True)
        except SolverError:
            logger.exception("Open-loop solve from random guess %s failed", seed)
            report = None
        results.append(GuessResult(seed=seed, report=report))
    return results


@dataclass(frozen=True)
class RunMetrics:
    seed: int
    avte: float
    min_distance: float
    collisions: int
    defined: bool = True


@dataclass
class RunResult:
    seed: int
    trace: ClosedLoopTrace
    metrics: RunMetrics


def compute_metrics(config: CorridorConfig, states: np.ndarray, seed: int) -> RunMetrics:
    """AVTE sums ‖(v_x − v_max, v_y)‖ over the measured states of each step; distances use every state."""
    steps = len(states) - 1
    if steps <= 0:
        return RunMetrics(seed=seed, avte=math.nan, min_distance=math.nan, collisions=0, defined=False)
    velocity_error = states[:-1, [VX, VY]] - np.array([config.v_x_max_mps, 0.0])
    distances = np.linalg.norm(states[:, [PX, PY]] - states[:, [PXH, PYH]], axis=1)
    return RunMetrics(
        seed=seed,
        avte=float(np.linalg.norm(velocity_error, axis=1).sum()),
        min_distance=float(distances.min()),
        collisions=int(np.count_nonzero(distances < COLLISION_DISTANCE_M)),
    )


def run_corridor(config: CorridorConfig, seed: int) -> RunResult:
    rng = np.random.default_rng(seed)
    problem = build_problem(config)
    x0 = initial_state(config, rng)
    trace = run_closed_loop(problem.controller(), x0, config.steps, rng)
    metrics = compute_metrics(config, trace.states, seed)
    logger.info(
        "Closed loop seed %s (%s, gamma=%g): AVTE %.3f, min distance %.3f m, collisions %s",
        seed,
        config.formulation,
        config.gamma,
        metrics.avte,
        metrics.min_distance,
        metrics.collisions,
    )
    return RunResult(seed=seed, trace=trace, metrics=metrics)


def run_seeds(config: CorridorConfig) -> List[int]:
    return [config.seed + i for i in range(config.repeats)]


def simulate(config: CorridorConfig, n_jobs: int = 1) -> List[RunResult]:
    seeds = run_seeds(config)
    if n_jobs == 1:
        return [run_corridor(config, seed) for seed in seeds]
    return list(Parallel(n_jobs=n_jobs)(delayed(run_corridor)(config, seed) for seed in seeds))


@dataclass(frozen=True)
class SweepCell:
    formulation: CorridorFormulation
    gamma: float
    seed: int
    metrics: RunMetrics | None


def _sweep_run(config: CorridorConfig, formulation: str, gamma: float, seed: int) -> SweepCell:
    cell_config = config.model_copy(update={"formulation": formulation, "gamma": gamma})
    try:
        metrics = run_corridor(cell_config, seed).metrics
    except RiskMMError:
        logger.exception("Sweep run failed (%s, gamma=%g, seed %s)", formulation, gamma, seed)
        metrics = None
    return SweepCell(formulation=formulation, gamma=gamma, seed=seed, metrics=metrics)


def sweep_gamma(
    config: CorridorConfig,
    gammas: Sequence[float],
    formulations: Sequence[CorridorFormulation] = ("optimistic", "pessimistic"),
    n_jobs: int = 1,
) -> List[SweepCell]:
    if not gammas:
        raise ConfigurationError("The gamma list is empty")
    if any(not (g > 0 and math.isfinite(g)) for g in gammas):
        raise ConfigurationError(f"Every gamma must be positive and finite, got {list(gammas)}")
    jobs = [(f, float(g), s) for f in formulations for g in gammas for s in run_seeds(config)]
    if n_jobs == 1:
        return [_sweep_run(config, *job) for job in jobs]
    return list(Parallel(n_jobs=n_jobs)(delayed(_sweep_run)(config, *job) for job in jobs))
