from __future__ import annotations

from datetime import datetime
from typing import Any, Dict, List, Literal

from pydantic import BaseModel, Field


class ConfigPayload(BaseModel):
    # partial CorridorConfig document; missing fields keep their defaults
    config: Dict[str, Any] = Field(default_factory=dict)
    overrides: List[str] = Field(default_factory=list)


class SolveRequest(ConfigPayload):
    random_init: bool | None = None


class IterationRow(BaseModel):
    m: int
    loss: float
    expected_loss: float
    optimality_error: float | None
    inner_iters: int
    wall_ms: float


class SolveResponse(BaseModel):
    formulation: str
    gamma: float
    status: Literal["converged", "max_iterations", "stalled"]
    mm_iterations: int
    final_loss: float
    final_error: float | None
    expected_loss: float
    u0: List[float]
    iterations: List[IterationRow]


class SimulateRequest(ConfigPayload):
    pass


class RunMetricsEntry(BaseModel):
    seed: int
    avte: float | None
    min_distance: float | None
    collisions: int
    defined: bool


class SimulateResponse(BaseModel):
    formulation: str
    gamma: float
    steps: int
    count: int
    runs: List[RunMetricsEntry]


class VerifyRequest(BaseModel):
    only: List[str] | None = None
    seed: int = 0


class CheckEntry(BaseModel):
    name: str
    group: str
    max_violation: float | None
    tolerance: float
    passed: bool
    detail: str = ""


class VerifyResponse(BaseModel):
    seed: int
    groups: List[str]
    passed: bool
    count: int
    failed: List[str]
    checks: List[CheckEntry]


class RunLogEntry(BaseModel):
    id: int
    timestamp: datetime
    kind: Literal["solve", "simulate", "verify"]
    config: Dict[str, Any] | None
    summary: Dict[str, Any]


class RunLogResponse(BaseModel):
    total: int
    limit: int
    offset: int
    count: int
    entries: List[RunLogEntry]


class HealthResponse(BaseModel):
    status: Literal["ok"] = "ok"
    service: str
    version: str
    check_groups: List[str]
    default_groups: List[str]
