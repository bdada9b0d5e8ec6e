from __future__ import annotations

import logging
from typing import Any, Callable, Dict

from fastapi import APIRouter
from fastapi import HTTPException
from fastapi import Query

from backend.models.schemas import (
    HealthResponse,
    RunLogResponse,
    SimulateRequest,
    SimulateResponse,
    SolveRequest,
    SolveResponse,
    VerifyRequest,
    VerifyResponse,
)
from backend.services.control_service import ControlService
from backend.services.run_store import RunStore
from riskmm import __version__
from riskmm.errors import ConfigurationError, InfeasibleStateError, RiskMMError
from riskmm.verification import CHECK_GROUPS, DEFAULT_GROUPS

router = APIRouter()
control_service = ControlService()
run_store = RunStore()
logger = logging.getLogger("riskmm.api.routes")


def _run(kind: str, action: Callable[[], Dict[str, Any]]) -> Dict[str, Any]:
    try:
        return action()
    except (ConfigurationError, InfeasibleStateError) as exc:
        logger.error("Rejected %s request: %s", kind, exc)
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    except RiskMMError as exc:
        logger.exception("%s request failed", kind)
        raise HTTPException(status_code=400, detail=f"{type(exc).__name__}: {exc}") from exc
    except Exception as exc:
        logger.exception("%s pipeline crashed", kind)
        raise HTTPException(status_code=500, detail=f"{kind} pipeline error: {exc}") from exc


@router.get("/", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(
        service="riskmm API",
        version=__version__,
        check_groups=sorted(CHECK_GROUPS),
        default_groups=list(DEFAULT_GROUPS),
    )


@router.post("/solve", response_model=SolveResponse)
def solve(payload: SolveRequest) -> SolveResponse:
    def action() -> Dict[str, Any]:
        config = control_service.build_config(payload.config, payload.overrides)
        summary = control_service.solve(config, random_init=payload.random_init)
        run_store.log_run("solve", config.model_dump(mode="json"), {k: v for k, v in summary.items() if k != "iterations"})
        return summary

    return SolveResponse(**_run("solve", action))


@router.post("/simulate", response_model=SimulateResponse)
def simulate(payload: SimulateRequest) -> SimulateResponse:
    def action() -> Dict[str, Any]:
        config = control_service.build_config(payload.config, payload.overrides)
        summary = control_service.simulate(config)
        run_store.log_run("simulate", config.model_dump(mode="json"), summary)
        return summary

    return SimulateResponse(**_run("simulate", action))


@router.post("/verify", response_model=VerifyResponse)
def verify(payload: VerifyRequest) -> VerifyResponse:
    def action() -> Dict[str, Any]:
        summary = control_service.verify(payload.only, seed=payload.seed)
        run_store.log_run(
            "verify",
            None,
            {"seed": summary["seed"], "groups": summary["groups"], "passed": summary["passed"], "failed": summary["failed"]},
        )
        return summary

    return VerifyResponse(**_run("verify", action))


@router.get("/runs", response_model=RunLogResponse)
def runs(
    limit: int = Query(default=50, ge=1, le=500),
    offset: int = Query(default=0, ge=0),
    kind: str | None = Query(default=None),
) -> RunLogResponse:
    return RunLogResponse(**run_store.fetch_runs(limit=limit, offset=offset, kind=kind))
