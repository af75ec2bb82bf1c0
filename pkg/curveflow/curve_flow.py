"""Closed curves in a chart, arclength calculus and the curve-shrinking flow ∂c/∂t = H."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import DomainError, FlowAborted, GeometryError, PreconditionError, SpecError, StepError
from .geometry_core import MetricFamily, checked_metric, christoffel_horizontal, g_inner
from .settings import get_settings

logger = logging.getLogger(__name__)

SCALAR_COLUMNS = ("L", "Theta", "Theta_eps", "max_k", "min_absX", "min_u")

CURVE_KINDS = {
    "torus_circle": "flat_torus",
    "torus_fourier": "flat_torus",
    "torus_line": "flat_torus",
    "sphere_latitude": "shrinking_sphere",
    "product_ramp": "sphere_cross_circle",
}


class CurveSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["torus_circle", "torus_fourier", "torus_line", "sphere_latitude", "product_ramp"]
    center: List[float] = Field(default_factory=lambda: [math.pi, math.pi], description="Torus center / line offset")
    radius: float = Field(1.0, description="Circle radius on the torus")
    amplitudes: List[float] = Field(default_factory=list, description="Relative radial Fourier amplitudes")
    seed: Optional[int] = Field(None, description="Phase seed for torus_fourier (falls back to the experiment seed)")
    theta0: float = Field(math.pi / 3, description="Polar angle of the latitude")
    winding: int = Field(1, description="Turns around the circle factor")
    modulation: float = Field(0.0, description="Speed modulation of the sphere angle on product_ramp")


@dataclass(frozen=True)
class DiscreteCurve:
    nodes: np.ndarray
    background: MetricFamily
    t: float

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != self.background.dimension:
            raise PreconditionError(f"Curve nodes must have shape (N, {self.background.dimension})")
        if nodes.shape[0] < 16 or nodes.shape[0] % 2:
            raise PreconditionError(f"Curve needs an even number of nodes >= 16 (got {nodes.shape[0]})")

    @property
    def N(self) -> int:
        return int(np.shape(self.nodes)[0])


@dataclass(frozen=True)
class CurveGeometry:
    t: float
    nodes: np.ndarray
    metric: np.ndarray
    christoffel: np.ndarray
    X: np.ndarray
    speed: np.ndarray
    S: np.ndarray
    H: np.ndarray
    k2: np.ndarray
    h: np.ndarray
    ds: np.ndarray
    epsilon: float
    length: float
    theta: float
    theta_eps: float

    @property
    def N(self) -> int:
        return int(self.speed.shape[0])

    @property
    def k(self) -> np.ndarray:
        return np.sqrt(self.k2)


@dataclass(frozen=True)
class FlowState:
    curve: DiscreteCurve
    dt: float
    epsilon: float = 0.0
    safety: float = field(default_factory=lambda: float(get_settings()["cfl_safety"]))

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise PreconditionError(f"dt must be > 0 (got {self.dt})")


@dataclass(frozen=True)
class Trajectory:
    background: MetricFamily
    times: np.ndarray
    nodes: np.ndarray
    epsilon: float
    dt: float
    record_every: int
    scalars: Dict[str, np.ndarray]
    _cache: Dict[Any, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def N(self) -> int:
        return int(self.nodes.shape[1])

    @property
    def frame_count(self) -> int:
        return int(self.times.shape[0])

    @property
    def frame_spacing(self) -> float:
        return float(self.dt * self.record_every)

    def curve(self, i: int) -> DiscreteCurve:
        return DiscreteCurve(self.nodes[i], self.background, float(self.times[i]))

    def geometry(self, i: int) -> CurveGeometry:
        if i not in self._cache:
            self._cache[i] = curve_geometry(self.curve(i), self.epsilon)
        return self._cache[i]


# ---------------- stencils ----------------

def periodic_dx(values: np.ndarray) -> np.ndarray:
    """Fourth-order central derivative in x ∈ [0, 1) along axis 0."""
    n = values.shape[0]
    return (
        -np.roll(values, -2, axis=0) + 8.0 * np.roll(values, -1, axis=0) - 8.0 * np.roll(values, 1, axis=0) + np.roll(values, 2, axis=0)
    ) * (n / 12.0)


def _tangent(curve: DiscreteCurve) -> np.ndarray:
    chart = curve.background.chart
    nodes = np.asarray(curve.nodes, dtype=float)
    n = curve.N
    lifted = nodes.copy()
    winding = np.zeros(nodes.shape[1])
    ext = chart.extent
    for i, per in enumerate(chart.periodic):
        if per:
            lifted[:, i] = np.unwrap(nodes[:, i], period=ext[i])
            winding[i] = np.round((lifted[-1, i] - lifted[0, i]) / ext[i]) * ext[i]
    x = np.arange(n) / n
    return periodic_dx(lifted - np.outer(x, winding)) + winding


def curve_geometry(curve: DiscreteCurve, epsilon: float = 0.0) -> CurveGeometry:
    m = curve.background
    t = float(curve.t)
    nodes = np.asarray(curve.nodes, dtype=float)
    m.chart.require_admissible(nodes)
    g = checked_metric(m, t, nodes)
    gamma = christoffel_horizontal(m, t, nodes)

    X = _tangent(curve)
    speed = np.sqrt(g_inner(g, X, X))
    floor = float(get_settings()["degenerate_speed"]) * float(np.max(m.chart.extent))
    if float(np.min(speed)) < floor:
        raise GeometryError(f"Curve is no longer immersed: min |X| = {np.min(speed):.3e}")
    S = X / speed[:, None]
    H = (periodic_dx(S) + np.einsum("jikl,jk,jl->ji", gamma, X, S)) / speed[:, None]
    k2 = np.maximum(g_inner(g, H, H), 0.0)
    h = np.sqrt(k2 + epsilon**2)
    ds = speed / curve.N
    return CurveGeometry(
        t=t,
        nodes=nodes,
        metric=g,
        christoffel=gamma,
        X=X,
        speed=speed,
        S=S,
        H=H,
        k2=k2,
        h=h,
        ds=ds,
        epsilon=float(epsilon),
        length=float(np.sum(ds)),
        theta=float(np.sum(np.sqrt(k2) * ds)),
        theta_eps=float(np.sum(h * ds)),
    )


def arclength_derivative(values: np.ndarray, geom: CurveGeometry, order: int = 1) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[0] != geom.N:
        raise PreconditionError(f"Field has {values.shape[0]} samples, curve has {geom.N} nodes")
    if order not in (1, 2):
        raise PreconditionError("order must be 1 or 2")
    scale = geom.speed.reshape((-1,) + (1,) * (values.ndim - 1))
    first = periodic_dx(values) / scale
    return first if order == 1 else periodic_dx(first) / scale


def covariant_derivative_along(vectors: np.ndarray, geom: CurveGeometry) -> np.ndarray:
    """∇^g_S V for a field V of chart components along the curve."""
    return (periodic_dx(vectors) + np.einsum("jikl,jk,jl->ji", geom.christoffel, geom.X, vectors)) / geom.speed[:, None]


def circle_component(geom: CurveGeometry, axis: int) -> np.ndarray:
    """u = g(S, e) with e the unit vector along the circle coordinate."""
    gs = np.einsum("jab,jb->ja", geom.metric, geom.S)
    return gs[:, axis] / np.sqrt(geom.metric[:, axis, axis])


# ---------------- flow ----------------

def default_dt(curve: DiscreteCurve, safety: Optional[float] = None) -> float:
    geom = curve_geometry(curve)
    safety = float(get_settings()["cfl_safety"]) if safety is None else safety
    return safety * float(np.min(geom.ds)) ** 2


def default_epsilon(curve: DiscreteCurve) -> float:
    geom = curve_geometry(curve)
    return 1e-3 * (float(np.max(geom.k)) + 1.0)


def _velocity(m: MetricFamily, t: float, nodes: np.ndarray) -> np.ndarray:
    return curve_geometry(DiscreteCurve(m.chart.reduce(nodes), m, t)).H


def flow_step(state: FlowState) -> FlowState:
    curve = state.curve
    m = curve.background
    t, dt = float(curve.t), float(state.dt)
    if t + dt > m.horizon + 1e-12:
        raise DomainError(f"Step to t={t + dt} passes the horizon {m.horizon}")
    geom = curve_geometry(curve)
    limit = float(get_settings()["cfl_limit"]) * float(np.min(geom.ds)) ** 2
    if dt > limit:
        raise StepError(f"dt={dt:.3e} exceeds the stability limit {limit:.3e} (min ds = {np.min(geom.ds):.3e})")

    x = np.asarray(curve.nodes, dtype=float)
    k1 = geom.H
    k2 = _velocity(m, t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = _velocity(m, t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = _velocity(m, t + dt, x + dt * k3)
    new_nodes = m.chart.reduce(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    m.chart.require_admissible(new_nodes)
    return replace(state, curve=DiscreteCurve(new_nodes, m, t + dt))


def frame_scalars(geom: CurveGeometry, circle_axis: Optional[int] = None) -> Dict[str, float]:
    return {
        "L": geom.length,
        "Theta": geom.theta,
        "Theta_eps": geom.theta_eps,
        "max_k": float(np.max(geom.k)),
        "min_absX": float(np.min(geom.speed)),
        "min_u": float(np.min(circle_component(geom, circle_axis))) if circle_axis is not None else math.nan,
    }


def step_plan(span: float, dt: float, record_every: int) -> Tuple[int, float]:
    """Step count (a multiple of record_every) and the shrunk dt that lands on span exactly."""
    steps = max(1, math.ceil(span / dt - 1e-9))
    steps = record_every * math.ceil(steps / record_every)
    return steps, span / steps


def integrate(
    state: FlowState,
    t_end: float,
    record_every: int = 1,
    monitors: Sequence[Callable[[CurveGeometry], None]] = (),
    track_u: bool = False,
) -> Trajectory:
    """Run the flow to t_end, recording a frame every ``record_every`` steps.

    The step count is rounded up to a multiple of ``record_every`` and dt is
    shrunk so that t_end is hit exactly with uniformly spaced frames.
    """
    curve = state.curve
    m = curve.background
    t0 = float(curve.t)
    if t_end > m.horizon + 1e-12:
        raise DomainError(f"t_end={t_end} beyond the background horizon {m.horizon}")
    if not t_end > t0:
        raise PreconditionError(f"t_end={t_end} must exceed the start time {t0}")
    if record_every < 1:
        raise PreconditionError("record_every must be >= 1")
    axis = m.circle_axis if track_u else None
    if track_u and axis is None:
        raise PreconditionError(f"Background '{m.name}' has no circle factor to measure u against")

    steps, dt = step_plan(t_end - t0, state.dt, record_every)
    state = replace(state, dt=dt)
    advised = default_dt(curve, state.safety)
    if dt > advised:
        logger.warning(f"[Flow] dt={dt:.3e} is above the advised {advised:.3e} (safety {state.safety:g})")
    logger.info(f"[Flow] {m.name}: {steps} steps of dt={dt:.3e} with N={curve.N} to t={t_end:g}")

    times: List[float] = []
    frames: List[np.ndarray] = []
    scalars: Dict[str, List[float]] = {name: [] for name in SCALAR_COLUMNS}

    def record(current: DiscreteCurve) -> None:
        geom = curve_geometry(current, state.epsilon)
        for monitor in monitors:
            monitor(geom)
        times.append(float(current.t))
        frames.append(np.array(current.nodes, dtype=float))
        for name, value in frame_scalars(geom, axis).items():
            scalars[name].append(value)

    def build() -> Trajectory:
        return Trajectory(
            background=m,
            times=np.asarray(times),
            nodes=np.asarray(frames),
            epsilon=float(state.epsilon),
            dt=dt,
            record_every=record_every,
            scalars={name: np.asarray(values) for name, values in scalars.items()},
        )

    try:
        record(state.curve)
        for step in range(1, steps + 1):
            state = flow_step(state)
            # pin frame times to the uniform grid
            state = replace(state, curve=replace(state.curve, t=t0 + step * dt if step < steps else t_end))
            if step % record_every == 0:
                record(state.curve)
    except (DomainError, GeometryError, StepError) as exc:
        event = float(state.curve.t)
        logger.warning(f"[Flow] {m.name}: aborted at t={event:.6g}: {exc.detail}")
        raise FlowAborted(f"{type(exc).__name__}: {exc.detail}", event, build()) from exc

    logger.info(f"[Flow] {m.name}: reached t={t_end:g}, L={scalars['L'][-1]:.6g}")
    return build()


# ---------------- seeds ----------------

def seed_curve(spec: CurveSpec, N: int, background: MetricFamily, seed: int = 0) -> DiscreteCurve:
    expected = CURVE_KINDS[spec.kind]
    if background.name != expected:
        raise SpecError(f"Curve kind '{spec.kind}' needs a {expected} background, got {background.name}")
    if N < 16 or N % 2:
        raise SpecError(f"Curve needs an even number of nodes >= 16 (got {N})")
    x = np.arange(N) / N
    angle = 2.0 * math.pi * x

    if spec.kind in ("torus_circle", "torus_fourier"):
        if not spec.radius > 0:
            raise SpecError("curve.radius must be > 0")
        radius = np.full(N, spec.radius)
        if spec.kind == "torus_fourier" and spec.amplitudes:
            rng = np.random.default_rng(spec.seed if spec.seed is not None else seed)
            phases = rng.uniform(0.0, 2.0 * math.pi, size=len(spec.amplitudes))
            modes = np.arange(len(spec.amplitudes)) + 2
            radius = spec.radius * (1.0 + np.sum(np.asarray(spec.amplitudes)[:, None] * np.cos(np.outer(modes, angle) + phases[:, None]), axis=0))
            if np.min(radius) <= 0:
                raise SpecError("curve.amplitudes make the radius non-positive")
        nodes = np.stack([spec.center[0] + radius * np.cos(angle), spec.center[1] + radius * np.sin(angle)], axis=-1)
    elif spec.kind == "torus_line":
        period = background.chart.extent[background.circle_axis]
        nodes = np.stack([np.full(N, spec.center[0]), spec.center[1] + period * x], axis=-1)
    elif spec.kind == "sphere_latitude":
        nodes = np.stack([np.full(N, spec.theta0), angle], axis=-1)
    else:
        if spec.winding < 1:
            raise SpecError("curve.winding must be >= 1")
        length = background.chart.extent[2]
        phi = angle + spec.modulation * np.sin(angle)
        nodes = np.stack([np.full(N, spec.theta0), phi, spec.winding * length * x], axis=-1)

    nodes = background.chart.reduce(nodes)
    if not np.all(background.chart.admissible(nodes)):
        raise SpecError(f"Seed curve '{spec.kind}' leaves the admissible chart region")
    return DiscreteCurve(nodes, background, 0.0)
