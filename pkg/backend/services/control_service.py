from __future__ import annotations

import math
from typing import Any, Dict, List, Sequence

from riskmm import corridor, surrogates
from riskmm.corridor import CorridorConfig
from riskmm.settings import Settings
from riskmm.verification import run_verification


def _finite_or_none(value: float) -> float | None:
    # JSON has no inf / nan
    return float(value) if math.isfinite(value) else None


class ControlService:
    def __init__(self, n_jobs: int | None = None) -> None:
        self.n_jobs = n_jobs if n_jobs is not None else Settings().threads

    def build_config(self, payload: Dict[str, Any], overrides: Sequence[str] = ()) -> CorridorConfig:
        return corridor.config_from_dict(payload, overrides)

    def solve(self, config: CorridorConfig, random_init: bool | None = None) -> Dict[str, Any]:
        traj, report = corridor.solve_open_loop(config, random_init=random_init)
        last = report.iterations[-1]
        return {
            "formulation": report.formulation,
            "gamma": report.gamma,
            "status": report.status,
            "mm_iterations": report.mm_iterations,
            "final_loss": report.final_loss,
            "final_error": _finite_or_none(report.final_error),
            "expected_loss": last.expected_loss,
            "u0": [float(v) for v in traj.u[0]],
            "iterations": [
                {
                    "m": it.m,
                    "loss": it.loss,
                    "expected_loss": it.expected_loss,
                    "optimality_error": _finite_or_none(it.optimality_error),
                    "inner_iters": it.inner_iterations,
                    "wall_ms": it.wall_ms,
                }
                for it in report.iterations
            ],
        }

    def simulate(self, config: CorridorConfig) -> Dict[str, Any]:
        results = corridor.simulate(config, n_jobs=self.n_jobs)
        runs: List[Dict[str, Any]] = [
            {
                "seed": r.metrics.seed,
                "avte": _finite_or_none(r.metrics.avte),
                "min_distance": _finite_or_none(r.metrics.min_distance),
                "collisions": r.metrics.collisions,
                "defined": r.metrics.defined,
            }
            for r in results
        ]
        return {
            "formulation": config.formulation,
            "gamma": config.gamma,
            "steps": config.steps,
            "count": len(runs),
            "runs": runs,
        }

    def verify(self, only: Sequence[str] | None = None, seed: int = 0) -> Dict[str, Any]:
        report = run_verification(only, seed=seed, pi_solver=surrogates.optimal_pi)
        return {
            "seed": report.seed,
            "groups": list(report.groups),
            "passed": report.passed,
            "count": len(report.checks),
            "failed": [check.name for check in report.failed],
            "checks": [
                {
                    "name": check.name,
                    "group": check.group,
                    "max_violation": _finite_or_none(check.max_violation),
                    "tolerance": check.tolerance,
                    "passed": check.passed,
                    "detail": check.detail,
                }
                for check in report.checks
            ],
        }
