from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from riskmm.mm_controller import SolverReport


class RiskMMError(Exception):
    """Base class for every error raised by the riskmm engine."""


class DimensionError(RiskMMError, ValueError):
    pass


class ConfigurationError(RiskMMError, ValueError):
    pass


class NonSmoothPointError(RiskMMError, ValueError):
    pass


class NonFiniteError(RiskMMError, ArithmeticError):
    pass


class InfeasibleStateError(RiskMMError, ValueError):
    pass


class OracleDomainError(RiskMMError, ValueError):
    pass


class SolverError(RiskMMError, RuntimeError):
    """Inner solve failed; ``report`` holds the MM iterations completed so far."""

    def __init__(self, message: str, report: "SolverReport | None" = None) -> None:
        super().__init__(message)
        self.report = report
