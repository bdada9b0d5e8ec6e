from __future__ import annotations

import numpy as np
import pytest

from riskmm.moe_dynamics import MoEModel
from riskmm.scenario_tree import build_tree
from riskmm.verification import random_instance


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def binary_tree():
    # d=2, N=2, fully branched: root 0, stage-1 nodes 1-2, leaves 3-6
    return build_tree(2, 2, 2)


@pytest.fixture
def instance(rng):
    return random_instance(rng, d=2, horizon=3)


@pytest.fixture
def collision_instance(rng):
    return random_instance(rng, d=2, horizon=3, collision="exp_norm")


def identity_model(d: int, n_x: int = 2, n_u: int = 1) -> MoEModel:
    return MoEModel(
        theta=np.zeros((d, n_x)),
        A=np.stack([np.eye(n_x)] * d),
        B=np.zeros((d, n_x, n_u)),
    )
