"""Error types shared by the lab.

Every error carries an ``exit_status`` and a human readable ``detail``, the same
status/detail pairing the runner uses to decide process exit codes.
"""

from __future__ import annotations

from typing import Any, List, Optional


class LabError(Exception):
    exit_status: int = 1

    def __init__(self, detail: str, *, exit_status: Optional[int] = None) -> None:
        super().__init__(detail)
        self.detail = detail
        if exit_status is not None:
            self.exit_status = exit_status


class DomainError(LabError, ValueError):
    """Point outside the admissible chart region or too close to the time boundary."""

    exit_status = 2


class GeometryError(LabError, ValueError):
    """Metric not positive definite, or a curve that is no longer immersed."""

    exit_status = 2


class PreconditionError(LabError, ValueError):
    pass


class StepError(LabError, RuntimeError):
    exit_status = 2


class SpecError(LabError, ValueError):
    pass


class ConfigError(LabError, ValueError):
    exit_status = 1

    def __init__(self, violations: List[str]) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "invalid configuration")


class FlowAborted(LabError, RuntimeError):
    """A flow integration stopped early; the partial trajectory is kept."""

    exit_status = 2

    def __init__(self, reason: str, time: float, trajectory: Any = None) -> None:
        super().__init__(f"{reason} at t={time:.17g}")
        self.reason = reason
        self.time = time
        self.trajectory = trajectory
