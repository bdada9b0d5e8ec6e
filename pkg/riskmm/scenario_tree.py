from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import List, Tuple

import numpy as np
from scipy import sparse

from riskmm.errors import DimensionError

logger = logging.getLogger("riskmm.scenario_tree")


@dataclass(frozen=True)
class Node:
    id: int
    stage: int
    parent: int | None
    mode: int | None
    children: Tuple[int, ...]


@dataclass(frozen=True)
class Scenario:
    leaf: int
    ancestors: Tuple[int, ...]
    modes: Tuple[int, ...]


@dataclass(frozen=True)
class ScenarioTree:
    """Mode realisations over the horizon, branching fully up to stage ``n_branch``.

    Node ids are dense and breadth-first, so every stage occupies a contiguous
    id range and the leaves (stage ``horizon``) come last. Modes are 1-based;
    the root carries no mode.
    """

    d: int
    horizon: int
    n_branch: int
    nodes: Tuple[Node, ...]
    scenarios: Tuple[Scenario, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    @property
    def n_inner(self) -> int:
        """Number of non-leaf nodes; they are exactly ids ``0..n_inner-1``."""
        return self.n_nodes - self.n_scenarios

    @cached_property
    def stages(self) -> np.ndarray:
        return np.array([n.stage for n in self.nodes], dtype=int)

    @cached_property
    def parents(self) -> np.ndarray:
        return np.array([-1 if n.parent is None else n.parent for n in self.nodes], dtype=int)

    @cached_property
    def modes(self) -> np.ndarray:
        return np.array([0 if n.mode is None else n.mode for n in self.nodes], dtype=int)

    @cached_property
    def leaves(self) -> np.ndarray:
        return np.array([s.leaf for s in self.scenarios], dtype=int)

    @cached_property
    def branching_edges(self) -> np.ndarray:
        """Mask over nodes: True where the incoming edge leaves a branching node."""
        mask = np.zeros(self.n_nodes, dtype=bool)
        for node in self.nodes[1:]:
            mask[node.id] = self.nodes[node.parent].stage < self.n_branch
        return mask

    @cached_property
    def path_matrix(self) -> sparse.csr_matrix:
        """Scenario × node incidence of root-to-leaf paths (leaf included)."""
        rows: List[int] = []
        cols: List[int] = []
        for s, scenario in enumerate(self.scenarios):
            path = (*scenario.ancestors, scenario.leaf)
            rows.extend([s] * len(path))
            cols.extend(path)
        data = np.ones(len(rows))
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n_scenarios, self.n_nodes))


def build_tree(d: int, horizon: int, n_branch: int, root_mode: int = 1) -> ScenarioTree:
    """Build the scenario tree for ``d`` modes over ``horizon`` stages.

    Nodes before stage ``n_branch`` get one child per mode (ordered 1..d);
    later nodes get a single child repeating their own mode. With
    ``n_branch == 0`` the root has one child carrying ``root_mode``.
    """
    if d < 1 or horizon < 1 or not 0 <= n_branch <= horizon:
        raise DimensionError(
            f"Invalid tree dimensions d={d}, N={horizon}, N_b={n_branch}; "
            "need d >= 1, N >= 1 and 0 <= N_b <= N"
        )
    if not 1 <= root_mode <= d:
        raise DimensionError(f"root_mode {root_mode} outside 1..{d}")

    stage_of: List[int] = [0]
    parent_of: List[int | None] = [None]
    mode_of: List[int | None] = [None]
    children_of: List[List[int]] = [[]]

    frontier = [0]
    for k in range(horizon):
        next_frontier: List[int] = []
        for node_id in frontier:
            if k < n_branch:
                child_modes = list(range(1, d + 1))
            else:
                own = mode_of[node_id]
                child_modes = [root_mode if own is None else own]
            for mode in child_modes:
                child_id = len(stage_of)
                stage_of.append(k + 1)
                parent_of.append(node_id)
                mode_of.append(mode)
                children_of.append([])
                children_of[node_id].append(child_id)
                next_frontier.append(child_id)
        frontier = next_frontier

    nodes = tuple(
        Node(id=i, stage=stage_of[i], parent=parent_of[i], mode=mode_of[i], children=tuple(children_of[i]))
        for i in range(len(stage_of))
    )

    scenarios: List[Scenario] = []
    for leaf in frontier:
        path: List[int] = []
        current = parent_of[leaf]
        while current is not None:
            path.append(current)
            current = parent_of[current]
        ancestors = tuple(reversed(path))
        modes = tuple(mode_of[i] for i in (*ancestors[1:], leaf))
        scenarios.append(Scenario(leaf=leaf, ancestors=ancestors, modes=modes))

    tree = ScenarioTree(d=d, horizon=horizon, n_branch=n_branch, nodes=nodes, scenarios=tuple(scenarios))
    logger.debug("Built scenario tree d=%s N=%s N_b=%s: %s nodes, %s scenarios", d, horizon, n_branch, tree.n_nodes, tree.n_scenarios)
    return tree


def stage_nodes(tree: ScenarioTree, k: int) -> List[int]:
    if not 0 <= k <= tree.horizon:
        raise DimensionError(f"Stage {k} outside 0..{tree.horizon}")
    return [int(i) for i in np.flatnonzero(tree.stages == k)]


def scenario_path(tree: ScenarioTree, leaf: int) -> List[Tuple[int, int | None]]:
    """Root-to-leaf path as ``(node id, incoming mode)`` pairs; the root's mode is None."""
    if not 0 <= leaf < tree.n_nodes or tree.nodes[leaf].stage != tree.horizon:
        raise DimensionError(f"Node {leaf} is not a leaf of this tree")
    path: List[Tuple[int, int | None]] = []
    current: int | None = leaf
    while current is not None:
        node = tree.nodes[current]
        path.append((node.id, node.mode))
        current = node.parent
    return list(reversed(path))


def node_count(d: int, horizon: int, n_branch: int) -> int:
    """Closed-form node count: sum of d^k for k <= N_b plus d^N_b (N - N_b)."""
    return sum(d**k for k in range(n_branch + 1)) + d**n_branch * (horizon - n_branch)
