from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from riskmm.errors import ConfigurationError, DimensionError, NonFiniteError, NonSmoothPointError
from riskmm.moe_dynamics import MoEModel, TrajectoryBundle, log_prob_pullback, scenario_log_probs
from riskmm.scenario_tree import ScenarioTree

logger = logging.getLogger("riskmm.objective")

Formulation = Literal["neutral", "optimistic", "pessimistic"]
PenaltyKind = Literal["exp_norm", "exp_sq_norm", "inverse_power"]
CollisionMode = Literal["exact", "upper_bound"]
Reference = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class CollisionPenalty:
    """Distance penalty c(x) = f1(f2(S x)) with f1 convex decreasing and f2 convex.

    ``selector`` maps the full state to the relative position Δp.
    """

    alpha: float
    beta: float
    selector: np.ndarray
    kind: PenaltyKind = "exp_norm"
    power: float = 1.0
    sigma: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigurationError(f"Collision alpha and beta must be positive, got {self.alpha}, {self.beta}")
        if self.kind == "inverse_power" and self.power <= 0:
            raise ConfigurationError(f"Inverse-power exponent must be positive, got {self.power}")
        selector = np.atleast_2d(np.asarray(self.selector, dtype=float))
        object.__setattr__(self, "selector", selector)
        sigma = np.eye(selector.shape[0]) if self.sigma is None else np.asarray(self.sigma, dtype=float)
        object.__setattr__(self, "sigma", sigma)

    @property
    def is_norm_kind(self) -> bool:
        return self.kind != "exp_sq_norm"

    def relative_position(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.selector.T

    def inner(self, dp: np.ndarray) -> np.ndarray:
        if self.kind == "exp_sq_norm":
            return np.einsum("ni,ij,nj->n", dp, self.sigma, dp)
        return np.linalg.norm(dp, axis=1)

    def inner_subgradient(self, dp: np.ndarray) -> np.ndarray:
        # w = 0 at the norm kink: the bound degenerates to the constant f1(0)
        if self.kind == "exp_sq_norm":
            return 2.0 * dp @ self.sigma
        norms = np.linalg.norm(dp, axis=1, keepdims=True)
        safe = np.where(norms > 0.0, norms, 1.0)
        return np.where(norms > 0.0, dp / safe, 0.0)

    def outer(self, z: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            if self.kind == "inverse_power":
                base = self.alpha + self.beta * np.maximum(z, 0.0)
                f0 = self.alpha ** (-self.power)
                slope0 = -self.power * self.beta * self.alpha ** (-self.power - 1.0)
                return np.where(z >= 0.0, base ** (-self.power), f0 + slope0 * z)
            return self.alpha * np.exp(-self.beta * z)

    def outer_derivative(self, z: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            if self.kind == "inverse_power":
                base = self.alpha + self.beta * np.maximum(z, 0.0)
                return -self.power * self.beta * base ** (-self.power - 1.0)
            return -self.alpha * self.beta * np.exp(-self.beta * z)

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.outer(self.inner(self.relative_position(x)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        dp = self.relative_position(x)
        if self.is_norm_kind and np.any(np.linalg.norm(dp, axis=1) == 0.0):
            raise NonSmoothPointError("Collision penalty is not differentiable at coincident positions")
        slope = self.outer_derivative(self.inner(dp))
        return (slope[:, None] * self.inner_subgradient(dp)) @ self.selector

    def _linearised_inner(self, x: np.ndarray, x_lin: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        dp = self.relative_position(x)
        dp_lin = self.relative_position(x_lin)
        w = self.inner_subgradient(dp_lin)
        z = self.inner(dp_lin) + np.einsum("ni,ni->n", w, dp - dp_lin)
        return z, w

    def upper_bound(self, x: np.ndarray, x_lin: np.ndarray) -> np.ndarray:
        z, _ = self._linearised_inner(x, x_lin)
        return self.outer(z)

    def upper_bound_gradient(self, x: np.ndarray, x_lin: np.ndarray) -> np.ndarray:
        z, w = self._linearised_inner(x, x_lin)
        return (self.outer_derivative(z)[:, None] * w) @ self.selector


@dataclass(frozen=True)
class CorridorReference:
    """x_ref(k) = (p_x,meas + k v_max dt, 0, v_max, 0)."""

    v_max: float
    dt: float
    px_index: int = 0

    def __call__(self, x_meas: np.ndarray, k: int) -> np.ndarray:
        return np.array([x_meas[self.px_index] + k * self.v_max * self.dt, 0.0, self.v_max, 0.0])


@dataclass(frozen=True)
class CostSpec:
    """Quadratic tracking of the coordinates ``tracked`` plus an optional collision penalty."""

    Q: np.ndarray
    R: np.ndarray
    Q_f: np.ndarray
    tracked: Tuple[int, ...]
    reference: Reference | None = None
    collision: CollisionPenalty | None = None

    def __post_init__(self) -> None:
        n_t = len(self.tracked)
        for name, shape in (("Q", (n_t, n_t)), ("Q_f", (n_t, n_t))):
            self._check_weight(name, shape)
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self._check_psd("R", R)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "tracked", tuple(int(i) for i in self.tracked))

    def _check_weight(self, name: str, shape: Tuple[int, int]) -> None:
        matrix = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
        if matrix.shape != shape:
            raise DimensionError(f"{name} must have shape {shape}, got {matrix.shape}")
        self._check_psd(name, matrix)
        object.__setattr__(self, name, matrix)

    @staticmethod
    def _check_psd(name: str, matrix: np.ndarray) -> None:
        if not np.allclose(matrix, matrix.T):
            raise ConfigurationError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(matrix).min() < -1e-10:
            raise ConfigurationError(f"{name} must be positive semidefinite")

    def references(self, x_meas: np.ndarray, horizon: int) -> np.ndarray:
        if self.reference is None:
            return np.zeros((horizon + 1, len(self.tracked)))
        return np.stack([np.asarray(self.reference(x_meas, k), dtype=float) for k in range(horizon + 1)])


@dataclass(frozen=True)
class RiskConfig:
    gamma: float = 1.0
    formulation: Formulation = "pessimistic"

    def __post_init__(self) -> None:
        if self.formulation not in ("neutral", "optimistic", "pessimistic"):
            raise ConfigurationError(f"Unknown formulation '{self.formulation}'")
        if self.formulation != "neutral" and not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive for the {self.formulation} formulation, got {self.gamma}")


def _tracking(spec: CostSpec, x: np.ndarray, ref: np.ndarray, weight: np.ndarray) -> float:
    dx = np.asarray(x, dtype=float)[list(spec.tracked)] - ref
    return 0.5 * float(dx @ weight @ dx)


def stage_cost(spec: CostSpec, x: np.ndarray, u: np.ndarray, k: int, x_meas: np.ndarray) -> float:
    ref = spec.references(x_meas, k)[k]
    u = np.asarray(u, dtype=float)
    if u.shape != (spec.R.shape[0],):
        raise DimensionError(f"Input has shape {u.shape}, R expects ({spec.R.shape[0]},)")
    cost = _tracking(spec, x, ref, spec.Q) + 0.5 * float(u @ spec.R @ u)
    if spec.collision is not None:
        cost += float(spec.collision.value(x)[0])
    return cost


def terminal_cost(spec: CostSpec, x: np.ndarray, k: int, x_meas: np.ndarray) -> float:
    cost = _tracking(spec, x, spec.references(x_meas, k)[k], spec.Q_f)
    if spec.collision is not None:
        cost += float(spec.collision.value(x)[0])
    return cost


def collision_penalty(spec: CostSpec, x: np.ndarray) -> float:
    if spec.collision is None:
        return 0.0
    return float(spec.collision.value(x)[0])


def collision_upper_bound(spec: CostSpec, x: np.ndarray, x_lin: np.ndarray) -> float:
    if spec.collision is None:
        return 0.0
    return float(spec.collision.upper_bound(np.atleast_2d(x), np.atleast_2d(x_lin))[0])


def _resolve_meas(traj: TrajectoryBundle, x_meas: np.ndarray | None) -> np.ndarray:
    return traj.x[0] if x_meas is None else np.asarray(x_meas, dtype=float)


def _check_lin(tree: ScenarioTree, collision_mode: CollisionMode, x_lin: np.ndarray | None) -> None:
    if collision_mode == "upper_bound":
        if x_lin is None:
            raise DimensionError("Upper-bound collision mode needs a linearisation bundle")
        if x_lin.shape[0] != tree.n_nodes:
            raise DimensionError(f"Linearisation bundle has {x_lin.shape[0]} states, tree has {tree.n_nodes} nodes")


def node_costs(
    tree: ScenarioTree,
    traj: TrajectoryBundle,
    spec: CostSpec,
    collision_mode: CollisionMode = "exact",
    x_lin: np.ndarray | None = None,
    x_meas: np.ndarray | None = None,
) -> np.ndarray:
    """Stage cost at every inner node and terminal cost at every leaf."""
    _check_lin(tree, collision_mode, x_lin)
    if traj.x.shape[0] != tree.n_nodes or traj.u.shape[0] != tree.n_inner:
        raise DimensionError("Trajectory bundle does not cover the tree")
    refs = spec.references(_resolve_meas(traj, x_meas), tree.horizon)[tree.stages]
    dx = traj.x[:, list(spec.tracked)] - refs
    inner = slice(0, tree.n_inner)
    leaf = slice(tree.n_inner, tree.n_nodes)

    costs = np.empty(tree.n_nodes)
    costs[inner] = 0.5 * np.einsum("ni,ij,nj->n", dx[inner], spec.Q, dx[inner])
    costs[inner] += 0.5 * np.einsum("ni,ij,nj->n", traj.u, spec.R, traj.u)
    costs[leaf] = 0.5 * np.einsum("ni,ij,nj->n", dx[leaf], spec.Q_f, dx[leaf])
    if spec.collision is not None:
        if collision_mode == "upper_bound":
            costs += spec.collision.upper_bound(traj.x, x_lin)
        else:
            costs += spec.collision.value(traj.x)
    return costs


def node_cost_pullback(
    tree: ScenarioTree,
    traj: TrajectoryBundle,
    spec: CostSpec,
    node_weights: np.ndarray,
    collision_mode: CollisionMode = "exact",
    x_lin: np.ndarray | None = None,
    x_meas: np.ndarray | None = None,
) -> TrajectoryBundle:
    """Gradient of ``node_weights · node_costs`` with the reference held fixed."""
    _check_lin(tree, collision_mode, x_lin)
    refs = spec.references(_resolve_meas(traj, x_meas), tree.horizon)[tree.stages]
    dx = traj.x[:, list(spec.tracked)] - refs
    n_in = tree.n_inner

    gx = np.zeros_like(traj.x)
    tracked = list(spec.tracked)
    gx[:n_in, tracked] = node_weights[:n_in, None] * (dx[:n_in] @ spec.Q)
    gx[n_in:, tracked] = node_weights[n_in:, None] * (dx[n_in:] @ spec.Q_f)
    gu = node_weights[:n_in, None] * (traj.u @ spec.R)
    if spec.collision is not None:
        if collision_mode == "upper_bound":
            gx += node_weights[:, None] * spec.collision.upper_bound_gradient(traj.x, x_lin)
        else:
            gx += node_weights[:, None] * spec.collision.gradient(traj.x)
    return TrajectoryBundle(x=gx, u=gu)


def scenario_losses(
    tree: ScenarioTree,
    traj: TrajectoryBundle,
    spec: CostSpec,
    collision_mode: CollisionMode = "exact",
    x_lin: np.ndarray | None = None,
    x_meas: np.ndarray | None = None,
) -> np.ndarray:
    """L_s = terminal cost at leaf s plus the stage costs of its ancestors."""
    return tree.path_matrix @ node_costs(tree, traj, spec, collision_mode, x_lin, x_meas)


def _check_losses(log_probs: np.ndarray, losses: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    log_probs = np.asarray(log_probs, dtype=float)
    losses = np.asarray(losses, dtype=float)
    if log_probs.shape != losses.shape:
        raise DimensionError(f"log-probabilities {log_probs.shape} and losses {losses.shape} differ in shape")
    if not np.all(np.isfinite(losses)):
        raise NonFiniteError("Scenario losses must be finite")
    return log_probs, losses


def expected_loss(log_probs: np.ndarray, losses: np.ndarray) -> float:
    log_probs, losses = _check_losses(log_probs, losses)
    return float(np.exp(log_probs) @ losses)


def loss_variance(log_probs: np.ndarray, losses: np.ndarray) -> float:
    mean = expected_loss(log_probs, losses)
    return float(np.exp(log_probs) @ (np.asarray(losses) - mean) ** 2)


def risk_loss(cfg: RiskConfig, log_probs: np.ndarray, losses: np.ndarray) -> float:
    log_probs, losses = _check_losses(log_probs, losses)
    if cfg.formulation == "neutral":
        return expected_loss(log_probs, losses)
    if cfg.formulation == "optimistic":
        return float(-logsumexp(log_probs - cfg.gamma * losses) / cfg.gamma)
    return float(logsumexp(log_probs + cfg.gamma * losses) / cfg.gamma)


def risk_weights(cfg: RiskConfig, log_probs: np.ndarray, losses: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of the risk loss with respect to (log P, L)."""
    log_probs, losses = _check_losses(log_probs, losses)
    if cfg.formulation == "neutral":
        probs = np.exp(log_probs)
        return probs * losses, probs
    if cfg.formulation == "optimistic":
        tilted = softmax(log_probs - cfg.gamma * losses)
        return -tilted / cfg.gamma, tilted
    tilted = softmax(log_probs + cfg.gamma * losses)
    return tilted / cfg.gamma, tilted


@dataclass
class RiskObjective:
    """The (nonconvex) risk loss and its gradient for a fixed measured state."""

    cfg: RiskConfig
    tree: ScenarioTree
    model: MoEModel
    spec: CostSpec
    x_meas: np.ndarray
    last_losses: np.ndarray | None = field(default=None, repr=False)

    def value(self, traj: TrajectoryBundle) -> float:
        log_probs = scenario_log_probs(self.tree, self.model, traj.x)
        losses = scenario_losses(self.tree, traj, self.spec, x_meas=self.x_meas)
        self.last_losses = losses
        return risk_loss(self.cfg, log_probs, losses)

    def expected(self, traj: TrajectoryBundle) -> float:
        log_probs = scenario_log_probs(self.tree, self.model, traj.x)
        return expected_loss(log_probs, scenario_losses(self.tree, traj, self.spec, x_meas=self.x_meas))

    def __call__(self, traj: TrajectoryBundle) -> Tuple[float, TrajectoryBundle]:
        log_probs = scenario_log_probs(self.tree, self.model, traj.x)
        losses = scenario_losses(self.tree, traj, self.spec, x_meas=self.x_meas)
        w_log_probs, w_losses = risk_weights(self.cfg, log_probs, losses)
        grad = node_cost_pullback(
            self.tree, traj, self.spec, self.tree.path_matrix.T @ w_losses, x_meas=self.x_meas
        )
        gate = softmax(traj.x @ self.model.theta.T, axis=1)
        gx = grad.x + log_prob_pullback(self.tree, self.model, gate, w_log_probs)
        return risk_loss(self.cfg, log_probs, losses), TrajectoryBundle(x=gx, u=grad.u)


def risk_loss_gradient(
    cfg: RiskConfig,
    tree: ScenarioTree,
    model: MoEModel,
    spec: CostSpec,
    traj: TrajectoryBundle,
    x_meas: np.ndarray | None = None,
) -> TrajectoryBundle:
    _, grad = RiskObjective(cfg, tree, model, spec, _resolve_meas(traj, x_meas))(traj)
    return grad
