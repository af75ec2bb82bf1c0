"""Exact Ricci-flow solutions used as ambient test beds."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import DomainError, SpecError
from .geometry_core import (
    ChartDomain,
    MetricFamily,
    curvature_block_norms,
    interior_time,
    sample_grid,
)
from .settings import get_settings

logger = logging.getLogger(__name__)

BACKGROUND_KINDS = {
    "flat_torus": "static flat 2-torus with the given periods",
    "shrinking_sphere": "round 2-sphere, g(t) = (r0^2 - 2t) g_unit in polar coordinates",
    "sphere_cross_circle": "shrinking round sphere times a static circle of length circle_length",
}


class BackgroundSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["flat_torus", "shrinking_sphere", "sphere_cross_circle"]
    horizon: float = Field(..., description="Final time T of the ambient flow")
    periods: List[float] = Field(default_factory=lambda: [2 * math.pi, 2 * math.pi], description="flat_torus periods")
    r0: float = Field(1.0, description="Initial sphere radius")
    circle_length: float = Field(1.0, description="Length of the static circle factor")
    pole_margin: float = Field(0.05, description="Guard band in theta around the poles")

    def spec_violations(self) -> List[str]:
        problems: List[str] = []
        if not self.horizon > 0:
            problems.append(f"background.horizon must be > 0 (got {self.horizon})")
        if self.kind == "flat_torus":
            if len(self.periods) != 2:
                problems.append("background.periods must list exactly two periods")
            if any(not p > 0 for p in self.periods):
                problems.append("background.periods must be strictly positive")
        else:
            if not self.r0 > 0:
                problems.append(f"background.r0 must be > 0 (got {self.r0})")
            elif self.horizon >= self.r0**2 / 2:
                problems.append(
                    f"background.horizon {self.horizon} violates the positivity bound r0^2/2 = {self.r0 ** 2 / 2:g}"
                )
            if not 0 <= self.pole_margin < math.pi / 4:
                problems.append("background.pole_margin must lie in [0, pi/4)")
        if self.kind == "sphere_cross_circle" and not self.circle_length > 0:
            problems.append(f"background.circle_length must be > 0 (got {self.circle_length})")
        return problems


@dataclass(frozen=True)
class BackgroundData:
    t: float
    r_squared: Optional[float]
    sup_ricci: float
    sup_grad_ricci: float
    mixed_sectional: Optional[float]
    horizontal_sectional: Optional[float]
    horizontal_block: float
    mixed_block: float


def _unit_sphere(theta: np.ndarray) -> np.ndarray:
    out = np.zeros(theta.shape + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = np.sin(theta) ** 2
    return out


def _unit_sphere_grad(theta: np.ndarray) -> np.ndarray:
    out = np.zeros(theta.shape + (2, 2, 2))
    out[..., 0, 1, 1] = np.sin(2.0 * theta)
    return out


def _with_circle(block: np.ndarray, corner: float) -> np.ndarray:
    out = np.zeros(block.shape[:-2] + (3, 3))
    out[..., :2, :2] = block
    out[..., 2, 2] = corner
    return out


def _flat_torus(spec: BackgroundSpec) -> MetricFamily:
    chart = ChartDomain(lower=(0.0, 0.0), upper=tuple(float(p) for p in spec.periods), periodic=(True, True))

    def metric(t, x):
        return np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2)).copy()

    def zeros(t, x):
        return np.zeros(np.shape(x)[:-1] + (2, 2))

    def grad(t, x):
        return np.zeros(np.shape(x)[:-1] + (2, 2, 2))

    return MetricFamily(chart, metric, zeros, spec.horizon, ricci=zeros, metric_grad=grad, circle_axis=1, name="flat_torus")


def _shrinking_sphere(spec: BackgroundSpec) -> MetricFamily:
    r0sq = spec.r0**2
    chart = ChartDomain(lower=(0.0, 0.0), upper=(math.pi, 2 * math.pi), periodic=(False, True), boundary_margin=spec.pole_margin)

    def metric(t, x):
        return (r0sq - 2.0 * t) * _unit_sphere(np.asarray(x)[..., 0])

    def metric_dot(t, x):
        return -2.0 * _unit_sphere(np.asarray(x)[..., 0])

    def ricci(t, x):
        return _unit_sphere(np.asarray(x)[..., 0])

    def grad(t, x):
        return (r0sq - 2.0 * t) * _unit_sphere_grad(np.asarray(x)[..., 0])

    return MetricFamily(chart, metric, metric_dot, spec.horizon, ricci=ricci, metric_grad=grad, name="shrinking_sphere")


def _sphere_cross_circle(spec: BackgroundSpec) -> MetricFamily:
    r0sq = spec.r0**2
    chart = ChartDomain(
        lower=(0.0, 0.0, 0.0),
        upper=(math.pi, 2 * math.pi, float(spec.circle_length)),
        periodic=(False, True, True),
        boundary_margin=spec.pole_margin,
    )

    def metric(t, x):
        return _with_circle((r0sq - 2.0 * t) * _unit_sphere(np.asarray(x)[..., 0]), 1.0)

    def metric_dot(t, x):
        return _with_circle(-2.0 * _unit_sphere(np.asarray(x)[..., 0]), 0.0)

    def ricci(t, x):
        return _with_circle(_unit_sphere(np.asarray(x)[..., 0]), 0.0)

    def grad(t, x):
        theta = np.asarray(x)[..., 0]
        out = np.zeros(theta.shape + (3, 3, 3))
        out[..., :2, :2, :2] = (r0sq - 2.0 * t) * _unit_sphere_grad(theta)
        return out

    return MetricFamily(
        chart, metric, metric_dot, spec.horizon, ricci=ricci, metric_grad=grad, circle_axis=2, name="sphere_cross_circle"
    )


_BUILDERS = {
    "flat_torus": _flat_torus,
    "shrinking_sphere": _shrinking_sphere,
    "sphere_cross_circle": _sphere_cross_circle,
}


def make_background(spec: BackgroundSpec) -> MetricFamily:
    problems = spec.spec_violations()
    if problems:
        raise SpecError("; ".join(problems))
    family = _BUILDERS[spec.kind](spec)
    logger.debug(f"[Background] built {spec.kind} on [0, {spec.horizon}]")
    return family


def exact_data(spec: BackgroundSpec, t: float) -> BackgroundData:
    if not 0.0 <= t <= spec.horizon:
        raise DomainError(f"Time {t} outside [0, {spec.horizon}]")
    family = make_background(spec)
    if spec.kind == "flat_torus":
        r_squared = None
        sup_ricci = 0.0
        mixed = horizontal = None
    else:
        r_squared = spec.r0**2 - 2.0 * t
        sup_ricci = 1.0 / r_squared
        # warped product dt² + r(t)² g_unit with r' = -1/r
        mixed = 1.0 / r_squared**2
        horizontal = (1.0 - 1.0 / r_squared) / r_squared

    # spacetime curvature needs time differencing, so sample just inside the interval
    per_axis = int(get_settings()["constants_space_samples"])
    blocks = curvature_block_norms(family, interior_time(family, t), sample_grid(family.chart, per_axis))
    return BackgroundData(
        t=float(t),
        r_squared=r_squared,
        sup_ricci=sup_ricci,
        sup_grad_ricci=0.0,
        mixed_sectional=mixed,
        horizontal_sectional=horizontal,
        horizontal_block=float(np.max(blocks["horizontal_block"])),
        mixed_block=float(np.max(blocks["mixed_block"])),
    )
